//! Dense `f64` tensors, a define-by-run reverse-mode tape, and the neural
//! primitives built on it.

mod error;
mod gemm;
pub mod gradcheck;
mod graph;
pub mod optim;
mod param;
pub mod resample;
mod tensor;

pub use error::{Result, TensorError};
pub use gemm::gemm;
pub use graph::{log_sigmoid, Gradients, Graph, Mask, Var};
pub use optim::{AdamWConfig, OptimizerState};
pub use param::{ParamId, ParamStore, Parameter};
pub use resample::{interpolate, ResampleMode};
pub use tensor::Tensor;
