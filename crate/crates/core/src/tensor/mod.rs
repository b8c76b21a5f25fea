//! Dense-tensor reverse-mode autodiff engine.
//!
//! Everything downstream (tokenizer, language model, training loops) builds
//! its forward passes on [`Tape`] and reads gradients back out of it after
//! [`Tape::backward`]. Training runs in `f32`; gradient acceptance checks
//! re-run the same graph code in `f64` through [`check::finite_diff_check`].

mod dense;
pub mod check;
pub mod tape;

pub use check::finite_diff_check;
pub use dense::{Dtype, Scalar, Tensor};
pub use tape::{Tape, Var};

use thiserror::Error;

/// Errors raised by tensor construction, primitives, and the backward pass.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: zero-norm row, normalization undefined")]
    ZeroNorm { op: &'static str },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },
    #[error("backward: loss is not connected to any gradient leaf")]
    DetachedGraph,
    #[error("backward: gradients already computed for this tape")]
    AlreadyConsumed,
    #[error("finite_diff_check: function is not deterministic (repeated evaluation differs)")]
    NonDeterministic,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Convert an `f64` literal into the active scalar type.
#[inline]
pub fn lit<S: Scalar>(x: f64) -> S {
    S::from_f64_lossy(x)
}
