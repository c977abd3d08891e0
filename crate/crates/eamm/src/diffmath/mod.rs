//! Dense-tensor math with reverse-mode automatic differentiation.
//!
//! The surface is deliberately small: enough for MLPs, an unrolled LSTM
//! cell, L1 losses, softmax, positional encoding, and the differentiable
//! warp geometry (2x2 inversion, bilinear sampling, box downsampling).
//!
//! A [`Graph`] is an eager tape: every op computes its value immediately
//! and records what it needs for the backward sweep. Tensors are immutable
//! values and safe to share read-only; a graph and its parameters are owned
//! by one trainer at a time.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheckFailure, GradCheckReport};
pub use graph::{Gradients, Graph, LstmWeights, NodeId, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::{bilinear_cell, pixel_coords};

use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("dimension mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("bad tensor shape: {reason}")]
    BadShape { reason: String },
    #[error("non-finite value {value} rejected")]
    NonFinite { value: f64 },
    #[error("loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("contract violation: {0}")]
    Contract(String),
}
