//! Tensor storage, differentiable primitives, and gradient verification.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_all, grad_check_sampled, relative_error, GradCheckReport};
pub use graph::{Backward, CustomOp, Graph, Var};
pub use ops::{causal_depthwise_conv1d, layer_norm, linear, sigmoid, silu, softplus};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
