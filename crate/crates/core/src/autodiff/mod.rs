//! Reverse-mode automatic differentiation over dense real arrays.
//!
//! Operations are recorded on a [`Tape`] while the forward pass runs; a
//! single reverse sweep from a scalar root then yields exact gradients for
//! every leaf. Tapes are single-threaded and rebuilt for every pass.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use tape::{Gradients, Tape, DIV_EPS, NORM_EPS};
pub use tensor::Tensor;

/// Index of a recorded operation on a tape.
pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: String },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: divisor below epsilon")]
    DivisorTooSmall { op: &'static str },
    #[error("{op}: reduction over zero elements")]
    EmptyReduction { op: &'static str },
    #[error("{op}: tensor node {node} does not belong to this tape")]
    ForeignTensor { op: &'static str, node: NodeId },
    #[error("backward: root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward: root is not tracked by the tape")]
    UntrackedRoot,
    #[error("backward: tape is empty")]
    EmptyTape,
}
