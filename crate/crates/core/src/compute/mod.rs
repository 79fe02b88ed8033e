//! Minimal differentiable tensor substrate.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradReport};
pub use graph::{backward, log_softmax_rows, softmax_rows, Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;
