//! Minimal differentiable compute: dense row-major tensors, a reverse-mode
//! tape, the named parameter store and finite-difference gradient checks.

mod gradcheck;
mod graph;
pub mod kernels;
mod layers;
mod params;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{Graph, RowSource, Var};
pub use kernels::{layer_norm, matmul, softmax};
pub use layers::{gru_cell, mlp_forward, GruVars, MlpVars};
pub use params::{Grads, ParamEntry, ParamStore};
pub use tensor::Tensor;
