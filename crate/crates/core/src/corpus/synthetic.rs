//! Generated bilingual corpora with controlled synonymy, in id space.
//!
//! Both sides are sequences of *concepts* drawn from a sparse Markov chain, so neighbouring
//! words carry some information about each other. Every concept is written with one of several
//! synonyms per side; the translation of a sentence is its concept sequence, word for word.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{TokenizedPair, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::numcore::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SynonymLanguage {
    pub concepts: usize,
    /// Relative frequencies of the source synonyms of every concept.
    pub source_weights: Vec<f64>,
    /// Relative frequencies of the target synonyms of every concept.
    pub target_weights: Vec<f64>,
    /// If set, the target synonym index copies the source one (needs equal synonym counts),
    /// making each source word recoverable from its translation.
    pub tied: bool,
    /// Forms of every target word; the form agrees with the class (`concept % inflections`)
    /// of the following concept.
    pub inflections: usize,
    /// Emit the target sentence in reverse order.
    pub reverse: bool,
    /// Successors per concept in the Markov chain.
    pub branching: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Seed of the language itself (chain structure), independent of sampling.
    pub seed: u64,
}

impl SynonymLanguage {
    /// Source synonyms are fixed by the target word: two synonyms on each side, tied.
    pub fn aligned_pairs(seed: u64) -> Self {
        SynonymLanguage {
            concepts: 24,
            source_weights: vec![0.5, 0.5],
            target_weights: vec![0.5, 0.5],
            tied: true,
            inflections: 1,
            reverse: false,
            branching: 3,
            min_len: 4,
            max_len: 10,
            seed,
        }
    }

    /// Skewed, independently chosen synonyms on both sides: many rare source words whose
    /// translation is shared with frequent ones.
    pub fn synonym_rich(seed: u64) -> Self {
        SynonymLanguage {
            concepts: 60,
            source_weights: vec![0.6, 0.25, 0.1, 0.05],
            target_weights: vec![0.9, 0.1],
            tied: false,
            inflections: 1,
            reverse: false,
            branching: 4,
            min_len: 4,
            max_len: 12,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synonym language: {m}")));
        if self.concepts == 0 || self.branching == 0 || self.inflections == 0 {
            return bad("needs concepts and successors");
        }
        if self.source_weights.is_empty() || self.target_weights.is_empty() {
            return bad("needs at least one synonym per side");
        }
        if self.source_weights.iter().chain(&self.target_weights).any(|w| !(*w > 0.0)) {
            return bad("synonym weights must be positive");
        }
        if self.tied && self.source_weights.len() != self.target_weights.len() {
            return bad("tied synonyms need equal counts on both sides");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("bad length range");
        }
        Ok(())
    }

    pub fn source_word(&self, concept: usize, synonym: usize) -> usize {
        NUM_SPECIALS + concept * self.source_weights.len() + synonym
    }

    pub fn target_word(&self, concept: usize, synonym: usize, form: usize) -> usize {
        let per_concept = self.target_weights.len() * self.inflections;
        NUM_SPECIALS
            + self.concepts * self.source_weights.len()
            + concept * per_concept
            + synonym * self.inflections
            + form
    }

    pub fn vocab_size(&self) -> usize {
        NUM_SPECIALS + self.concepts * (self.source_weights.len() + self.target_weights.len() * self.inflections)
    }

    /// Concept of a source or target word, if it is one.
    pub fn concept_of(&self, id: usize) -> Option<usize> {
        let ks = self.source_weights.len();
        let kt = self.target_weights.len() * self.inflections;
        let split = NUM_SPECIALS + self.concepts * ks;
        if id < NUM_SPECIALS || id >= self.vocab_size() {
            None
        } else if id < split {
            Some((id - NUM_SPECIALS) / ks)
        } else {
            Some((id - split) / kt)
        }
    }

    /// Printable word for an id: `s<concept>.<synonym>` or `t<concept>.<synonym>.<form>`.
    pub fn word_name(&self, id: usize) -> Option<String> {
        let c = self.concept_of(id)?;
        let ks = self.source_weights.len();
        if id < NUM_SPECIALS + self.concepts * ks {
            Some(format!("s{c}.{}", (id - NUM_SPECIALS) % ks))
        } else {
            let off = (id - NUM_SPECIALS - self.concepts * ks) % (self.target_weights.len() * self.inflections);
            Some(format!("t{c}.{}.{}", off / self.inflections, off % self.inflections))
        }
    }

    fn successors(&self) -> Vec<Vec<usize>> {
        let mut r = rng::rng(rng::substream(self.seed, "synonym-language"));
        let all: Vec<usize> = (0..self.concepts).collect();
        (0..self.concepts)
            .map(|_| {
                let mut s = all.clone();
                s.shuffle(&mut r);
                s.truncate(self.branching.min(self.concepts));
                s
            })
            .collect()
    }

    /// `n` sentence pairs sampled with `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<TokenizedPair>> {
        self.validate()?;
        let next = self.successors();
        let mut r = rng::rng(seed);
        let pick = |w: &[f64], r: &mut rng::Rng| {
            let total: f64 = w.iter().sum();
            let mut u = r.random::<f64>() * total;
            for (i, x) in w.iter().enumerate() {
                if u < *x {
                    return i;
                }
                u -= x;
            }
            w.len() - 1
        };
        let v = self.vocab_size();
        (0..n)
            .map(|_| {
                let len = r.random_range(self.min_len..=self.max_len);
                let mut concepts = vec![r.random_range(0..self.concepts)];
                while concepts.len() < len {
                    let c = concepts[concepts.len() - 1];
                    concepts.push(next[c][r.random_range(0..next[c].len())]);
                }
                let (mut x, mut y) = (Vec::with_capacity(len), Vec::with_capacity(len));
                for (i, &c) in concepts.iter().enumerate() {
                    let s = pick(&self.source_weights, &mut r);
                    let t = if self.tied { s } else { pick(&self.target_weights, &mut r) };
                    let form = concepts.get(i + 1).map_or(0, |n| n % self.inflections);
                    x.push(self.source_word(c, s));
                    y.push(self.target_word(c, t, form));
                }
                if self.reverse {
                    y.reverse();
                }
                TokenizedPair::new(x, y, v)
            })
            .collect()
    }
}
