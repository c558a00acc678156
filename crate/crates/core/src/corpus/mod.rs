//! Parallel text ingestion, joint BPE vocabulary and padded batching.

pub mod batch;
pub mod bpe;
pub mod synthetic;
pub mod vocab;

use std::fs;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

pub use batch::{make_batches, PaddedBatch, TokenizedPair};
pub use bpe::{learn_bpe, MergeTable, END_OF_WORD};
pub use vocab::{build_vocab, is_special, Vocab, BOS, CLS, EOS, MASK, NUM_SPECIALS, PAD, SEP, UNK};

use crate::error::{Error, Result};

/// NFC normalization applied to every line before tokenization.
pub fn normalize(line: &str) -> String {
    line.nfc().collect()
}

/// One line of a parallel corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
}

impl SentencePair {
    pub fn new(source: &str, target: &str) -> Result<Self> {
        for (side, s) in [("source", source), ("target", target)] {
            if s.trim().is_empty() {
                return Err(Error::Data(format!("{side} sentence is empty")));
            }
            if s.contains(['\n', '\r']) {
                return Err(Error::Data(format!("{side} sentence contains a newline")));
            }
        }
        Ok(SentencePair {
            source: source.trim().to_string(),
            target: target.trim().to_string(),
        })
    }
}

/// Reads two line-aligned UTF-8 files.
pub fn read_parallel(src: &Path, tgt: &Path) -> Result<Vec<SentencePair>> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())));
    let s = read(src)?;
    let t = read(tgt)?;
    let sl: Vec<&str> = s.lines().collect();
    let tl: Vec<&str> = t.lines().collect();
    if sl.len() != tl.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            sl.len(),
            tgt.display(),
            tl.len()
        )));
    }
    sl.iter()
        .zip(&tl)
        .enumerate()
        .map(|(i, (a, b))| SentencePair::new(a, b).map_err(|e| Error::Data(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn tokenize_pairs(pairs: &[SentencePair], merges: &MergeTable, vocab: &Vocab) -> Result<Vec<TokenizedPair>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            TokenizedPair::new(vocab.tokenize(&p.source, merges), vocab.tokenize(&p.target, merges), vocab.len())
                .map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// One id sequence per line, space separated.
pub fn ids_to_text(seqs: impl IntoIterator<Item = impl AsRef<[usize]>>) -> String {
    let mut out = String::new();
    for s in seqs {
        let line: Vec<String> = s.as_ref().iter().map(usize::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn ids_from_text(text: &str) -> Result<Vec<Vec<usize>>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Data(format!("line {}: bad id {t:?}", i + 1))))
                .collect()
        })
        .collect()
}

/// Reads aligned `.ids` files into validated pairs.
pub fn read_id_pairs(src: &Path, tgt: &Path, vocab_size: usize) -> Result<Vec<TokenizedPair>> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())));
    let xs = ids_from_text(&read(src)?)?;
    let ys = ids_from_text(&read(tgt)?)?;
    if xs.len() != ys.len() {
        return Err(Error::Data(format!("{} and {} differ in line count", src.display(), tgt.display())));
    }
    xs.into_iter()
        .zip(ys)
        .enumerate()
        .map(|(i, (x, y))| TokenizedPair::new(x, y, vocab_size).map_err(|e| Error::Data(format!("line {}: {e}", i + 1))))
        .collect()
}
