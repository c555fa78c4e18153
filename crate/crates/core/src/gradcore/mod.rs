//! Minimal reverse-mode gradient engine over dense `f64` matrices.

mod graph;
mod matrix;
mod params;

pub use graph::{Gradients, Graph, Node, NodeId, Op};
pub use matrix::{block_gram, block_mix, block_transpose, dot, mix_row, sigmoid, softmax_in_place, xlogx, Matrix};
pub use params::{sgd_step, AdamState, ParamArray, ParamStore, StepReport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape { node: usize, op: &'static str, detail: String },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("graph input `{0}` is not bound")]
    Unbound(String),
    #[error("backward seed node {node} is not scalar (shape {shape:?})")]
    NotScalar { node: usize, shape: (usize, usize) },
    #[error("gradient for `{name}` has shape {got:?}, parameter is {expected:?}")]
    ParamShape { name: String, expected: (usize, usize), got: (usize, usize) },
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f64),
}
