//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is an immutable-by-convention value. Differentiable programs are
//! recorded on a [`Graph`]: every op appends a node holding its output value and
//! whatever it needs for the backward pass. Node creation order is a valid
//! topological order, so [`Graph::backward`] is a single reverse sweep.

mod gemm;
mod grad_check;
mod graph;
mod value;

pub use grad_check::{grad_check, GradCheckConfig};
pub use graph::{Gradients, Graph, Var};
pub use value::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("loss has no unmasked positions")]
    EmptyLoss,
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("tensor format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
