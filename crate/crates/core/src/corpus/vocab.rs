use std::collections::HashMap;
use std::fmt::Write as _;

use crate::corpus::bpe::{MergeTable, END_OF_WORD};
use crate::corpus::normalize;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SEP: usize = 4;
pub const CLS: usize = 5;
pub const MASK: usize = 6;
pub const NUM_SPECIALS: usize = 7;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<s>", "</s>", "<sep>", "<cls>", "<mask>"];

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIALS
}

/// Joint source/target token inventory; special tokens hold the lowest ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Vocabulary made of the special tokens followed by `tokens` in order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut ids = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens: all, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Subword ids of one line; symbols outside the vocabulary fall back to characters, then UNK.
    pub fn tokenize(&self, line: &str, merges: &MergeTable) -> Vec<usize> {
        let mut out = Vec::new();
        for word in normalize(line).split_whitespace() {
            for sym in merges.segment(word) {
                match self.id(&sym) {
                    Some(id) => out.push(id),
                    None => {
                        let (stem, final_piece) = match sym.strip_suffix(END_OF_WORD) {
                            Some(stem) => (stem, true),
                            None => (sym.as_str(), false),
                        };
                        let n = stem.chars().count();
                        for (i, c) in stem.chars().enumerate() {
                            let piece = if final_piece && i + 1 == n {
                                format!("{c}{END_OF_WORD}")
                            } else {
                                c.to_string()
                            };
                            out.push(self.id(&piece).unwrap_or(UNK));
                        }
                    }
                }
            }
        }
        out
    }

    /// Subword strings of `ids` with specials dropped (UNK kept as its token).
    pub fn symbols(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .filter(|&&i| i == UNK || !is_special(i))
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]))
            .collect()
    }

    /// Rejoins subwords into whitespace-separated words.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut current = String::new();
        for sym in self.symbols(ids) {
            if let Some(stem) = sym.strip_suffix(END_OF_WORD) {
                current.push_str(stem);
                words.push(std::mem::take(&mut current));
            } else if sym == SPECIAL_TOKENS[UNK] {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(sym.to_string());
            } else {
                current.push_str(sym);
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        words.join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("vocab line {}: expected token<TAB>id", i + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("vocab line {}: bad id {id:?}", i + 1)))?;
            if id != i {
                return Err(Error::Data(format!("vocab line {}: id {id} is not dense", i + 1)));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIAL_TOKENS {
            return Err(Error::Data("vocab must start with the special tokens".into()));
        }
        Self::from_tokens(tokens.split_off(NUM_SPECIALS))
    }
}

/// Specials plus every subword type with frequency >= `min_freq`, ordered by descending
/// frequency then lexicographically.
pub fn build_vocab<S: AsRef<str>>(lines: &[S], merges: &MergeTable, min_freq: usize) -> Result<Vocab> {
    let mut freq: HashMap<String, usize> = HashMap::new();
    for line in lines {
        for w in normalize(line.as_ref()).split_whitespace() {
            for s in merges.segment(w) {
                *freq.entry(s).or_default() += 1;
            }
        }
    }
    let mut entries: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(t, f)| *f >= min_freq.max(1) && !SPECIAL_TOKENS.contains(&t.as_str()))
        .collect();
    entries.sort_by(|(ta, fa), (tb, fb)| fb.cmp(fa).then_with(|| ta.cmp(tb)));
    Vocab::from_tokens(entries.into_iter().map(|(t, _)| t))
}
