//! Float64 tensors, a reverse-mode autodiff tape, AdamW and a binary
//! checkpoint format. CPU only, serial, deterministic.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;
