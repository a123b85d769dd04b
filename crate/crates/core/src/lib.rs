//! Pointer-augmented neural memory.
//!
//! An encoder writes a sequence into an external memory `M`; alongside it sits
//! an *address bank* `A` of consecutive binary addresses, randomly based so that
//! address arithmetic generalises beyond training lengths.  Pointer units --
//! small recurrent networks -- walk those addresses symbolically (mode-1
//! dereference), and an optional content head compares dereferenced values
//! against the whole memory (mode-2 access).  A controller consumes both kinds
//! of value and emits output tokens one at a time.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`] -- reverse-mode tape over `ndarray` matrices, the handful of
//!   batched memory ops the model needs, recurrent cells, Adam/SGD, and a
//!   finite-difference gradient checker.
//! * [`address`] -- binary address banks, base-address sampling, and the
//!   coupon-collector coverage diagnostic.
//! * [`pointer`] -- pointer-unit step, mode-1 dereference, mode-2 access.
//! * [`tasks`] -- generators and independent oracles for the six algorithmic
//!   tasks plus the Dyck prefix-validity task.
//! * [`model`] -- the full model, two sequence-to-sequence baselines, and the
//!   checkpoint format.
//! * [`harness`] -- training/evaluation runs, run records, ablation sweeps.
//!
//! Everything numeric is generic over [`Scalar`]; training uses [`Real`]
//! (`f32`) while gradient checks instantiate the same code at `f64`.

pub mod address;
pub mod autodiff;
pub mod harness;
pub mod model;
pub mod pointer;
pub mod tasks;
pub mod textio;

use std::fmt;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Floating-point scalar the engine is generic over.
///
/// `f32` and `f64` implement this; nothing else is expected to.  The two
/// conversion helpers exist because literals in model code are written as
/// `f64` and converted once at the edge.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Scalar type used for training and evaluation.
pub type Real = f32;

/// Scalar type used for gradient checking and numerics tests.
pub type Check = f64;

/// Tape recording ops at training precision.
pub type RealTape = autodiff::Tape<Real>;

/// Tape recording ops at checking precision.
pub type CheckTape = autodiff::Tape<Check>;

/// Parameter set at training precision.
pub type RealParams = autodiff::ParamSet<Real>;
