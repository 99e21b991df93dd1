//! Differentiation engine: reverse-mode tape with an embedded forward-mode
//! channel for derivatives w.r.t. the scalar time input.

mod dual;
mod graph;
mod optim;
mod params;
mod tensor;

pub use dual::Dual;
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, Optimizer, OptimizerKind};
pub use params::{NamedTensor, ParamId, ParamStore};
pub use tensor::Tensor;
