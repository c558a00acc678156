//! Transformer encoder-decoder for translation and the bidirectional masked-LM encoder.

pub mod cmlm_model;
pub mod config;
pub mod layers;
pub mod nmt;

pub use cmlm_model::{CmlmModel, NUM_SEGMENTS};
pub use config::TransformerConfig;
pub use layers::multi_head_attention;
pub use nmt::{NmtInputs, NmtModel, NmtOutput};
