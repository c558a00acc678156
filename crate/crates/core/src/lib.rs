//! Soft contextual data augmentation for neural machine translation driven by two
//! conditional masked language models, one per side of the parallel corpus.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below pick the two precisions
//! the crate is used with (64-bit for verification, 32-bit for training).

pub mod augment;
pub mod cmlm;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod numcore;
pub mod trainer;

pub use error::{Error, Result};
pub use numcore::Scalar;

pub type Tensor32 = numcore::Tensor<f32>;
pub type Tensor64 = numcore::Tensor<f64>;
pub type Graph32 = numcore::Graph<f32>;
pub type Graph64 = numcore::Graph<f64>;

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
