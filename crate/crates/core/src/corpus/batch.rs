use rand::seq::SliceRandom;

use crate::corpus::vocab::{is_special, MASK, PAD};
use crate::error::{Error, Result};
use crate::numcore::rng;

/// Source and target id sequences of one sentence pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenizedPair {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
}

impl TokenizedPair {
    /// Checks the pair invariants: both sides non-empty, no PAD or MASK, ids inside the vocabulary.
    pub fn new(x: Vec<usize>, y: Vec<usize>, vocab_size: usize) -> Result<Self> {
        for (side, seq) in [("source", &x), ("target", &y)] {
            if seq.is_empty() {
                return Err(Error::Data(format!("{side} side is empty")));
            }
            if let Some(bad) = seq.iter().find(|&&i| i == PAD || i == MASK || i >= vocab_size) {
                return Err(Error::Data(format!("{side} side contains invalid id {bad}")));
            }
        }
        Ok(TokenizedPair { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len().max(self.y.len())
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty() && self.y.is_empty()
    }

    /// True if neither side holds a special id other than UNK.
    pub fn is_plain(&self) -> bool {
        self.x.iter().chain(&self.y).all(|&i| i == crate::corpus::UNK || !is_special(i))
    }
}

/// Row-major padded id matrices of a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    pub x_ids: Vec<usize>,
    pub y_ids: Vec<usize>,
    pub x_len: Vec<usize>,
    pub y_len: Vec<usize>,
    /// Corpus index of every row.
    pub indices: Vec<usize>,
}

impl PaddedBatch {
    pub fn from_pairs(pairs: &[&TokenizedPair], indices: Vec<usize>) -> Self {
        let lx = pairs.iter().map(|p| p.x.len()).max().unwrap_or(0);
        let ly = pairs.iter().map(|p| p.y.len()).max().unwrap_or(0);
        let mut x_ids = vec![PAD; pairs.len() * lx];
        let mut y_ids = vec![PAD; pairs.len() * ly];
        for (r, p) in pairs.iter().enumerate() {
            x_ids[r * lx..r * lx + p.x.len()].copy_from_slice(&p.x);
            y_ids[r * ly..r * ly + p.y.len()].copy_from_slice(&p.y);
        }
        PaddedBatch {
            x_ids,
            y_ids,
            x_len: pairs.iter().map(|p| p.x.len()).collect(),
            y_len: pairs.iter().map(|p| p.y.len()).collect(),
            indices,
        }
    }

    pub fn size(&self) -> usize {
        self.x_len.len()
    }

    pub fn lx(&self) -> usize {
        self.x_len.iter().copied().max().unwrap_or(0)
    }

    pub fn ly(&self) -> usize {
        self.y_len.iter().copied().max().unwrap_or(0)
    }

    pub fn x_row(&self, r: usize) -> &[usize] {
        let lx = self.lx();
        &self.x_ids[r * lx..r * lx + self.x_len[r]]
    }

    pub fn y_row(&self, r: usize) -> &[usize] {
        let ly = self.ly();
        &self.y_ids[r * ly..r * ly + self.y_len[r]]
    }

    pub fn pair(&self, r: usize) -> TokenizedPair {
        TokenizedPair {
            x: self.x_row(r).to_vec(),
            y: self.y_row(r).to_vec(),
        }
    }
}

/// Shuffles by `seed`, groups pairs of similar length into batches of at most `max_tokens`
/// padded tokens per side, and shuffles the batch order. Every pair lands in exactly one batch.
pub fn make_batches(pairs: &[TokenizedPair], max_tokens: usize, seed: u64) -> Result<Vec<PaddedBatch>> {
    if let Some((i, p)) = pairs.iter().enumerate().find(|(_, p)| p.len() > max_tokens) {
        return Err(Error::Data(format!(
            "pair at line {} has {} tokens, more than max_tokens={max_tokens}",
            i + 1,
            p.len()
        )));
    }
    let mut r = rng::rng(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut r);
    order.sort_by_key(|&i| pairs[i].len());

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let len = pairs[i].len();
        if !current.is_empty() && (current.len() + 1) * longest.max(len) > max_tokens {
            groups.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut r);
    Ok(groups
        .into_iter()
        .map(|g| {
            let rows: Vec<&TokenizedPair> = g.iter().map(|&i| &pairs[i]).collect();
            PaddedBatch::from_pairs(&rows, g)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tp(x: &[usize], y: &[usize]) -> TokenizedPair {
        TokenizedPair::new(x.to_vec(), y.to_vec(), 100).unwrap()
    }

    #[test]
    fn pair_invariants() {
        assert!(TokenizedPair::new(vec![], vec![9], 10).is_err());
        assert!(TokenizedPair::new(vec![PAD], vec![9], 10).is_err());
        assert!(TokenizedPair::new(vec![8], vec![MASK], 10).is_err());
        assert!(TokenizedPair::new(vec![8], vec![10], 10).is_err());
    }

    #[test]
    fn single_pair_single_batch() {
        let b = make_batches(&[tp(&[7, 8], &[9])], 10, 0).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].x_ids, vec![7, 8]);
        assert_eq!(b[0].y_ids, vec![9]);
    }

    #[test]
    fn equal_lengths_need_no_padding() {
        let b = make_batches(&[tp(&[7, 8], &[9, 10]), tp(&[11, 12], &[13, 14])], 100, 3).unwrap();
        assert_eq!(b.len(), 1);
        assert!(!b[0].x_ids.contains(&PAD) && !b[0].y_ids.contains(&PAD));
    }

    #[test]
    fn too_long_pair_reports_line() {
        let err = make_batches(&[tp(&[7], &[8]), tp(&[7, 7, 7], &[8])], 2, 0).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let pairs: Vec<_> = (0..50).map(|i| tp(&vec![7; 1 + i % 5], &vec![8; 1 + i % 3])).collect();
        let a = make_batches(&pairs, 12, 42).unwrap();
        assert_eq!(a, make_batches(&pairs, 12, 42).unwrap());
        assert_ne!(a, make_batches(&pairs, 12, 43).unwrap());
    }
}
