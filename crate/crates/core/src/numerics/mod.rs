//! Dense `f64` tensors and reverse-mode differentiation.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{check_gradients, finite_diff_check, relative_error, GradCheckReport};
pub use graph::{softplus, value_and_grad, value_only, CustomVjp, Graph, ParamVars, Var};
pub use kernels::{conv3x3, matmul};
pub use tensor::{elementwise, ElementwiseKind, ParamStore, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("{op:?} takes {expected} operand(s)")]
    Arity { op: ElementwiseKind, expected: usize },
    #[error("{op}: value {value} at index {index} outside domain")]
    Domain { op: &'static str, index: usize, value: f64 },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("gradient requested through unregistered primitive `{0}`")]
    Unregistered(String),
    #[error("backward requires a one-element output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("non-finite function value at probe {name}[{index}]")]
    NonFiniteProbe { name: String, index: usize },
    #[error("{0}")]
    InvalidArgument(String),
}
