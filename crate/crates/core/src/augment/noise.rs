use rand::Rng;

use crate::corpus::{TokenizedPair, MASK, NUM_SPECIALS};
use crate::error::{Error, Result};

/// Context-independent corruption of a token sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseSpec {
    /// Bounded-distance shuffle within a window of `k`.
    Swap(usize),
    /// Delete each token with probability `p`.
    Drop(f64),
    /// Replace each token with MASK with probability `p`.
    Blank(f64),
    /// Replace each token with a unigram sample with probability `p`.
    Smooth(f64),
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::Swap(0) => Err(Error::InvalidArgument("swap window must be at least 1".into())),
            NoiseSpec::Drop(p) | NoiseSpec::Blank(p) | NoiseSpec::Smooth(p) if !(0.0..=1.0).contains(&p) => {
                Err(Error::InvalidArgument(format!("noise probability {p} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Token frequency distribution over ordinary (non-special) ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Unigram {
    ids: Vec<usize>,
    cumulative: Vec<f64>,
}

impl Unigram {
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let mut ids = Vec::new();
        let mut cumulative = Vec::new();
        let mut total = 0.0;
        for (id, &c) in counts.iter().enumerate().skip(NUM_SPECIALS) {
            if c > 0 {
                total += c as f64;
                ids.push(id);
                cumulative.push(total);
            }
        }
        if ids.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        cumulative.iter_mut().for_each(|c| *c /= total);
        Ok(Unigram { ids, cumulative })
    }

    /// Counts both sides of a corpus.
    pub fn from_corpus(pairs: &[TokenizedPair], vocab_size: usize) -> Result<Self> {
        let mut counts = vec![0u64; vocab_size];
        for p in pairs {
            for &t in p.x.iter().chain(&p.y) {
                counts[t] += 1;
            }
        }
        Self::from_counts(&counts)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = rng.random::<f64>();
        let i = self.cumulative.partition_point(|&c| c <= u);
        self.ids[i.min(self.ids.len() - 1)]
    }

    pub fn probability(&self, id: usize) -> f64 {
        match self.ids.binary_search(&id) {
            Ok(i) => self.cumulative[i] - if i == 0 { 0.0 } else { self.cumulative[i - 1] },
            Err(_) => 0.0,
        }
    }
}

pub fn noise<R: Rng + ?Sized>(seq: &[usize], spec: NoiseSpec, unigram: &Unigram, rng: &mut R) -> Result<Vec<usize>> {
    spec.validate()?;
    if seq.is_empty() {
        return Err(Error::InvalidArgument("cannot noise an empty sequence".into()));
    }
    Ok(match spec {
        NoiseSpec::Swap(k) => {
            let mut keyed: Vec<(f64, usize)> = seq
                .iter()
                .enumerate()
                .map(|(i, &t)| (i as f64 + rng.random::<f64>() * (k + 1) as f64, t))
                .collect();
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
            keyed.into_iter().map(|(_, t)| t).collect()
        }
        NoiseSpec::Drop(p) => {
            let keep: Vec<bool> = seq.iter().map(|_| rng.random::<f64>() >= p).collect();
            if keep.iter().any(|&k| k) {
                seq.iter().zip(&keep).filter(|(_, &k)| k).map(|(&t, _)| t).collect()
            } else {
                vec![seq[rng.random_range(0..seq.len())]]
            }
        }
        NoiseSpec::Blank(p) => seq.iter().map(|&t| if rng.random::<f64>() < p { MASK } else { t }).collect(),
        NoiseSpec::Smooth(p) => seq
            .iter()
            .map(|&t| if rng.random::<f64>() < p { unigram.sample(rng) } else { t })
            .collect(),
    })
}
