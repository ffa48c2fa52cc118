//! Dense tensor kernels and a reverse-mode differentiation tape.
//!
//! Everything is generic over [`Scalar`] so the same model code can train in
//! f32 and be verified in f64. The tape ([`Graph`]) owns every intermediate
//! value; node creation order is the topological order, and the backward
//! sweep walks it once in reverse, so gradients are bit-identical across
//! runs with the same seed.

pub mod gradcheck;
mod graph;
mod gru;
mod scalar;
mod tensor;

pub use gradcheck::{check_all_kernel_ops, grad_check, REL_ERR_GUARD};
pub use graph::{Graph, TensorId};
pub use gru::{gru_cell, GruWeights};
pub use scalar::Scalar;
pub use tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Errors raised by tensor kernels and the differentiation tape.
#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("bad shape in {op}: expected {expected}, got {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: (usize, usize),
    },
    #[error("softmax input is fully masked")]
    AllMasked,
    #[error("dropout rate must lie in [0, 1), got {0}")]
    BadDropoutRate(f64),
    #[error("row id {id} out of range for table with {rows} rows")]
    IdOutOfRange { id: usize, rows: usize },
    #[error("{op}: index {index} out of bounds for extent {bound}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("loss must be a 1x1 scalar, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

impl NumericsError {
    /// True when the failure is a NaN/Inf blow-up rather than a usage error.
    pub fn is_numerical(&self) -> bool {
        matches!(self, NumericsError::NonFinite(_))
    }
}
