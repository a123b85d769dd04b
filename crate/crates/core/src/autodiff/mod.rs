//! Reverse-mode automatic differentiation over `ndarray` matrices.
//!
//! A [`Tape`] is an append-only arena of nodes.  Every operation records its
//! inputs by index, so indices are always topologically ordered and the
//! backward sweep is a single reverse pass.  Values are dense 2-D arrays;
//! column vectors, batched activations and stacked memories all use the same
//! representation.
//!
//! Batched sequence data uses a *stacked* layout: a memory of `s` slots over a
//! batch of `n` sequences is one `(d, s*n)` matrix whose column `t*n + i`
//! holds slot `t` of sequence `i`.  The ops that care ([`Tape::cosine_cols`],
//! [`Tape::deref`], [`Tape::mem_colsum`], [`Tape::add_per_slot`],
//! [`Tape::dot_cols`]) take the batch width and recover the slot structure
//! from it.
//!
//! Parameters live outside the tape in a [`ParamSet`] and are bound as leaf
//! nodes each step with [`Tape::bind`]; after [`Tape::backward`] their
//! gradients are pulled back with [`Tape::harvest`].

mod cells;
mod gradcheck;
mod optim;
mod tape;

pub use cells::{bind_gru, bind_lstm, bind_mlp, gru_step, init_gru, init_lstm, init_mlp,
                lstm_step, mlp2, Act, GruVars, LstmVars, MlpVars};
pub use gradcheck::{gradcheck, GradCheckConfig, GradCheckReport};
pub use optim::{AdamConfig, Param, ParamSet};
pub use tape::{NormGuard, OpKind, Tape, Var};

use std::error::Error;
use std::fmt;

/// Errors raised while building or differentiating a computation graph.
#[derive(Debug, Clone, PartialEq)]
pub enum EngineError {
    /// Two operands whose shapes cannot be combined by the named op.
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    /// A slice or visibility bound that does not fit inside the operand.
    BadRange {
        op: &'static str,
        start: usize,
        end: usize,
        extent: usize,
    },
    /// A stacked operand whose column count is not `slots * batch`.
    BadStack {
        op: &'static str,
        cols: usize,
        batch: usize,
    },
    /// An op that requires a `1x1` operand got something else.
    NotScalar {
        op: &'static str,
        shape: (usize, usize),
    },
    /// Cosine similarity met a zero-norm column under [`NormGuard::Strict`].
    ZeroNorm { op: &'static str, column: usize },
    /// A class index at or beyond the number of rows of the logits.
    ClassOutOfRange {
        op: &'static str,
        column: usize,
        class: usize,
        classes: usize,
    },
    /// Lookup of a parameter name that was never registered.
    UnknownParam(String),
    /// Parameter registered twice.
    DuplicateParam(String),
    /// Optimizer step with a parameter whose gradient was never populated.
    MissingGrad(String),
    /// A value that must be finite (loss, gradient norm) was NaN or infinite.
    NonFinite { context: String },
}

impl fmt::Display for EngineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EngineError::ShapeMismatch { op, lhs, rhs } => write!(
                f,
                "{op}: shape mismatch {}x{} vs {}x{}",
                lhs.0, lhs.1, rhs.0, rhs.1
            ),
            EngineError::BadRange { op, start, end, extent } => {
                write!(f, "{op}: range {start}..{end} out of bounds for extent {extent}")
            }
            EngineError::BadStack { op, cols, batch } => {
                write!(f, "{op}: {cols} columns do not stack over batch {batch}")
            }
            EngineError::NotScalar { op, shape } => {
                write!(f, "{op}: expected 1x1 value, got {}x{}", shape.0, shape.1)
            }
            EngineError::ZeroNorm { op, column } => {
                write!(f, "{op}: zero-norm column {column} under strict norm guard")
            }
            EngineError::ClassOutOfRange { op, column, class, classes } => {
                write!(f, "{op}: class {class} at column {column} outside 0..{classes}")
            }
            EngineError::UnknownParam(name) => write!(f, "unknown parameter `{name}`"),
            EngineError::DuplicateParam(name) => write!(f, "parameter `{name}` already registered"),
            EngineError::MissingGrad(name) => write!(f, "parameter `{name}` has no gradient"),
            EngineError::NonFinite { context } => write!(f, "non-finite value in {context}"),
        }
    }
}

impl Error for EngineError {}
