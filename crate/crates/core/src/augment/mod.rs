//! Embedding-level soft substitution, token-level hard substitution and noising baselines.

pub mod hard;
pub mod noise;
pub mod soft;

pub use crate::cmlm::SoftDistribution;
pub use hard::{hard_substitute, hard_substitute_batch, sample_index, write_synthetic, HardStrategy, HardSubstitution};
pub use noise::{noise, NoiseSpec, Unigram};
pub use soft::{apply_plan, plan_soft_substitution, select_positions, soft_embedding, without_specials, SubstitutionPlan};
