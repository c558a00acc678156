use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Additive corpus statistics: clipped matches and totals per n-gram order plus lengths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

fn ngram_counts<W: Eq + Hash>(words: &[W], n: usize) -> HashMap<&[W], u64> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

impl BleuStats {
    pub fn sentence<W: Eq + Hash>(hyp: &[W], reference: &[W]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len() as u64,
            ref_len: reference.len() as u64,
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1) as u64;
            s.matches[n - 1] = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    pub fn report(&self) -> BleuReport {
        let precisions: [f64; MAX_ORDER] = std::array::from_fn(|n| {
            if self.totals[n] == 0 {
                0.0
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            }
        });
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let brevity_penalty = if c == 0.0 {
            0.0
        } else if c < r {
            (1.0 - r / c).exp()
        } else {
            1.0
        };
        let bleu = if precisions.contains(&0.0) {
            0.0
        } else {
            let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
            100.0 * brevity_penalty * mean_log.exp()
        };
        BleuReport {
            bleu,
            precisions,
            brevity_penalty,
            stats: *self,
        }
    }
}

/// Corpus-level BLEU with clipped n-gram precisions up to 4-grams and a brevity penalty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub stats: BleuStats,
}

impl BleuReport {
    pub fn to_records(&self) -> String {
        format!(
            "bleu={:.4} p1={:.6} p2={:.6} p3={:.6} p4={:.6} bp={:.6} hyp_len={} ref_len={}",
            self.bleu,
            self.precisions[0],
            self.precisions[1],
            self.precisions[2],
            self.precisions[3],
            self.brevity_penalty,
            self.stats.hyp_len,
            self.stats.ref_len
        )
    }
}

impl std::fmt::Display for BleuReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p: Vec<String> = self.precisions.iter().map(|p| format!("{:.1}", 100.0 * p)).collect();
        write!(
            f,
            "BLEU = {:.2}, {} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            p.join("/"),
            self.brevity_penalty,
            self.stats.hyp_len as f64 / self.stats.ref_len.max(1) as f64,
            self.stats.hyp_len,
            self.stats.ref_len
        )
    }
}

pub fn sentence_stats<W: Eq + Hash, S: AsRef<[W]>>(hyps: &[S], refs: &[S]) -> Result<Vec<BleuStats>> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(hyps.iter().zip(refs).map(|(h, r)| BleuStats::sentence(h.as_ref(), r.as_ref())).collect())
}

pub fn bleu<W: Eq + Hash, S: AsRef<[W]>>(hyps: &[S], refs: &[S]) -> Result<BleuReport> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument("no references".into()));
    }
    let mut total = BleuStats::default();
    for s in sentence_stats(hyps, refs)? {
        total += s;
    }
    Ok(total.report())
}

/// Whitespace tokenization of text lines, as BLEU input.
pub fn words(lines: &[String]) -> Vec<Vec<String>> {
    lines.iter().map(|l| l.split_whitespace().map(str::to_string).collect()).collect()
}
