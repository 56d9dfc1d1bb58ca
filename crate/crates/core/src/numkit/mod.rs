//! Dense tensors, a recording tape for reverse-mode differentiation, and
//! finite-difference gradient verification.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamSet, Parameterized};
pub use graph::{Gradients, Graph, Parameter, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Additive bias applied to masked attention keys before the softmax.
pub const MASK_BIAS: f64 = -1e9;

/// Layer-norm epsilon used throughout the encoder.
pub const LN_EPS: f64 = 1e-5;
