//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The tape is define-by-run: a training step records its forward pass, runs
//! [`Tape::backward`] once, and then calls [`Tape::reset`] before the next step.

mod check;
mod gumbel;
mod optim;
mod tape;
mod tensor;

pub use check::max_gradient_error;
pub use gumbel::{gumbel_noise, gumbel_softmax_sample, GumbelSample};
pub use optim::{adamw_step, AdamState, AdamW, ParamStore};
pub use tape::{Elementwise, Gradients, Tape, Var};
pub use tensor::{softmax_slice, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    Ragged,
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for extent {len}")]
    Index { index: usize, len: usize },
    #[error("operand missing")]
    MissingOperand,
    #[error("variable belongs to a reset tape")]
    StaleVar,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,
    #[error("invalid hyperparameter: {0}")]
    Parameter(String),
}
