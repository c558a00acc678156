//! Decoding, corpus BLEU, paired bootstrap significance and masked-token consistency.

pub mod bleu;
pub mod bootstrap;
pub mod consistency;
pub mod decode;

pub use bleu::{bleu, sentence_stats, words, BleuReport, BleuStats, MAX_ORDER};
pub use bootstrap::{paired_bootstrap, BootstrapReport};
pub use consistency::{consistency_accuracy, ConsistencyReport, PredictionRecord, SideConsistency};
pub use decode::{decode, decode_scored, greedy_batch, sequence_score, Hypothesis};
