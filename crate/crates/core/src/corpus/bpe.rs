use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Appended to the final symbol of every word.
pub const END_OF_WORD: &str = "</w>";

/// Ordered byte-pair merge rules; earlier rules bind first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

/// Initial symbols of a word: its characters, the last one carrying the end-of-word marker.
pub fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len().saturating_sub(1);
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| if i == last { format!("{c}{END_OF_WORD}") } else { c.to_string() })
        .collect()
}

impl MergeTable {
    pub fn new(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate merge rule {} {}", m.0, m.1)));
            }
        }
        Ok(MergeTable { merges, ranks })
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn rules(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Splits one whitespace-free word into subword symbols by repeatedly merging the
    /// lowest-ranked adjacent pair.
    pub fn segment(&self, word: &str) -> Vec<String> {
        let mut symbols = word_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else {
                return symbols;
            };
            let (left, right) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == left && &symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("#version: 1\n");
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "#version: 1" => {}
            other => return Err(Error::Data(format!("merge table header must be '#version: 1', found {other:?}"))),
        }
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => merges.push((a.to_string(), b.to_string())),
                _ => return Err(Error::Data(format!("merge table line {}: expected two symbols", i + 2))),
            }
        }
        Self::new(merges)
    }
}

/// Learns up to `num_merges` merges greedily by pair frequency; ties go to the
/// lexicographically smallest pair.
pub fn learn_bpe<S: AsRef<str>>(lines: &[S], num_merges: usize) -> Result<MergeTable> {
    let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
    for line in lines {
        for w in super::normalize(line.as_ref()).split_whitespace() {
            *word_freq.entry(w.to_string()).or_default() += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut words: Vec<(Vec<String>, usize)> = word_freq.iter().map(|(w, &f)| (word_symbols(w), f)).collect();
    let mut merges = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, f) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += f;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .map(|((a, b), _)| (a.to_string(), b.to_string()));
        let Some((left, right)) = best else {
            break;
        };
        let joined = format!("{left}{right}");
        for (syms, _) in words.iter_mut() {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == left && syms[i + 1] == right {
                    syms[i] = joined.clone();
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        merges.push((left, right));
    }
    MergeTable::new(merges)
}
