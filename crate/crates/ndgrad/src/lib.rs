//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! The library is deliberately small: it provides exactly the primitive set
//! needed to express and train a selective state-space classifier (elementwise
//! arithmetic with trailing-axis broadcasting, 2-D matrix products, last-axis
//! contraction, a handful of activations, and shape surgery), plus an escape
//! hatch for fused kernels with hand-written backward passes.
//!
//! Core math is generic over the scalar type via [`Scalar`]; `f64` is the
//! default and the concrete aliases [`Tensor64`] / [`Tensor32`] are exported
//! at the crate root.
//!
//! Gradients are computed by recording primitives on a [`Tape`] during the
//! forward pass and replaying it in reverse. Tape construction is
//! single-threaded; tensors that are not attached to a tape are immutable
//! value types.

mod check;
mod ops;
mod tape;
mod tensor;

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use check::finite_diff_check;
pub use ops::{concat, primitive_apply, PrimKind};
pub use tape::{CustomOp, Gradients, Tape};
pub use tensor::Tensor;

/// Concrete 64-bit instantiation used throughout the downstream pipeline.
pub type Tensor64 = Tensor<f64>;
/// 32-bit instantiation, available for memory-bound experiments.
pub type Tensor32 = Tensor<f32>;

/// Scalar types the tensor core is generic over.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Numerically stable `ln(1 + e^x)`.
    fn softplus(self) -> Self {
        if self > Self::zero() {
            self + (-self).exp().ln_1p()
        } else {
            self.exp().ln_1p()
        }
    }

    /// Numerically stable logistic function.
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Errors surfaced by tensor construction, primitives, and backward passes.
#[derive(Debug, Error)]
pub enum NdError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("operands of {op} belong to different tapes")]
    TapeMismatch { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tensor is not attached to a tape")]
    Detached,
    #[error("function is not deterministic: repeated evaluations disagree")]
    NonDeterministic,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = NdError> = std::result::Result<T, E>;
