//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamError};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};

pub(crate) use graph::sigmoid;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid axis {axis} for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        shape: Vec<usize>,
        axis: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: no inputs")]
    EmptyInput { op: &'static str },
    #[error("backward needs a one-element loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward called twice on the same graph without reset")]
    BackwardTwice,
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("objective evaluated to a non-finite value")]
    NonFiniteObjective,
}
