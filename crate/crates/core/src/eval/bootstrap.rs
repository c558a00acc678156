use std::hash::Hash;

use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::bleu::{sentence_stats, BleuStats};
use crate::numcore::rng::{child, rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapReport {
    /// Fraction of resamples where system A does not beat system B.
    pub p_value: f64,
    pub wins_a: f64,
    pub wins_b: f64,
    pub ties: f64,
    pub samples: usize,
    pub bleu_a: f64,
    pub bleu_b: f64,
}

impl BootstrapReport {
    pub fn to_records(&self) -> String {
        format!(
            "bleu_a={:.4} bleu_b={:.4} p_value={:.6} wins_a={:.6} wins_b={:.6} ties={:.6} samples={}",
            self.bleu_a, self.bleu_b, self.p_value, self.wins_a, self.wins_b, self.ties, self.samples
        )
    }
}

/// Paired bootstrap resampling over sentence indices. Resample `i` draws from its own
/// stream derived from `seed`, so results depend only on `(inputs, samples, seed)`.
pub fn paired_bootstrap<W: Eq + Hash, S: AsRef<[W]>>(
    hyp_a: &[S],
    hyp_b: &[S],
    refs: &[S],
    samples: usize,
    seed: u64,
) -> Result<BootstrapReport> {
    if samples < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 resamples, got {samples}")));
    }
    if refs.is_empty() {
        return Err(Error::InvalidArgument("no references".into()));
    }
    let sa = sentence_stats(hyp_a, refs)?;
    let sb = sentence_stats(hyp_b, refs)?;
    let n = refs.len();
    let total = |s: &[BleuStats]| {
        let mut t = BleuStats::default();
        s.iter().for_each(|x| t += *x);
        t.report().bleu
    };
    let (mut a_wins, mut b_wins, mut ties) = (0usize, 0usize, 0usize);
    for i in 0..samples {
        let mut r = rng(child(seed, i as u64));
        let (mut ta, mut tb) = (BleuStats::default(), BleuStats::default());
        for _ in 0..n {
            let k = r.random_range(0..n);
            ta += sa[k];
            tb += sb[k];
        }
        let (ba, bb) = (ta.report().bleu, tb.report().bleu);
        if ba > bb {
            a_wins += 1;
        } else if bb > ba {
            b_wins += 1;
        } else {
            ties += 1;
        }
    }
    let f = |c: usize| c as f64 / samples as f64;
    Ok(BootstrapReport {
        p_value: f(samples - a_wins),
        wins_a: f(a_wins),
        wins_b: f(b_wins),
        ties: f(ties),
        samples,
        bleu_a: total(&sa),
        bleu_b: total(&sb),
    })
}
