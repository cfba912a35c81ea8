//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, GradCheckReport, ParamGradError, MAX_EPSILON};
pub use graph::{Graph, NodeId, ParamId, Parameter, NORMALIZER_EPSILON};
