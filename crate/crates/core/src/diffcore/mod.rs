//! Dense tensors, an eager reverse-mode graph with double-backward support,
//! MLP building blocks and Adam.

mod adam;
mod check;
mod graph;
mod nn;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use check::{finite_diff_check, finite_diff_check_many, finite_diff_check_with, grad_wrt_input, Stencil};
pub use graph::{backward, Graph, Var};
pub use nn::{mlp_forward, Activation, BoundMlp, Layer, Mlp};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
}
