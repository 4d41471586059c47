//! Automatic differentiation: dense tensors, a reverse-mode tape, and
//! forward-mode dual numbers, all speaking the same [`Value`] vocabulary so
//! network and loss code can be written once and run in any mode.

pub mod dual;
pub mod fdiff;
pub mod gradcheck;
pub mod tape;
pub mod tensor;
pub mod value;

pub use dual::{jvp, Dual, DualTensor};
pub use tape::{Gradients, Tape, TapeMode, Var};
pub use tensor::Tensor;
pub use value::Value;

use thiserror::Error;

/// Errors raised by tensor kernels, the tape, and forward-mode rules.
#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: inner dimensions disagree ({lhs:?} x {rhs:?})")]
    InnerDim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: data length {got} does not match shape {shape:?} ({expected} elements)")]
    LengthMismatch {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{op}: column range {start}..{end} out of bounds for {cols} columns")]
    ColRange {
        op: &'static str,
        start: usize,
        end: usize,
        cols: usize,
    },
    #[error("{op}: reshape cannot map {from:?} ({from_n} elements) to {to:?} ({to_n} elements)")]
    ReshapeCount {
        op: &'static str,
        from: Vec<usize>,
        from_n: usize,
        to: Vec<usize>,
        to_n: usize,
    },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: tape is frozen; no new nodes may be recorded")]
    FrozenTape { op: &'static str },
    #[error("backward requires a frozen tape; call freeze() first")]
    TapeNotFrozen,
    #[error("{op}: operands belong to different tapes")]
    CrossTape { op: &'static str },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArg { op: &'static str, msg: String },
}
