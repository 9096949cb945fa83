//! Dense `f64` tensors, a reverse-mode gradient tape, and the handful of
//! kernels the forecaster needs.

mod activation;
mod batchnorm;
pub mod gradcheck;
mod graph;
mod tensor;

pub use activation::{rectifier, sigmoid, softplus, softplus_inv, Activation};
pub use batchnorm::{batch_norm, BatchNormState, Mode};
pub use graph::{CustomOp, Graph, Var};
pub use tensor::Tensor;
