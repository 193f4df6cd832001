//! Dense tensors, differentiable primitives and reverse-mode gradients.

pub mod gradcheck;
mod graph;
pub mod init;
pub mod kernels;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use graph::{Backward, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
