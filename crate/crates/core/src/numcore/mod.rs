//! Dense tensors, reverse-mode autodiff, optimizers, schedules and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointHeader, ModelRole};
pub use gradcheck::grad_check;
pub use graph::{DropoutKey, Graph, Var};
pub use optim::{AdamConfig, AdamState};
pub use params::ParamStore;
pub use scalar::{DType, Scalar};
pub use schedule::{lr_inverse_sqrt, lr_triangular};
pub use tensor::Tensor;
