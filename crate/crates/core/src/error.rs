//! Crate-wide error type.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by tensor construction, tape operations, and the domain
/// modules built on them. Shape errors always name both offending shapes.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two shapes that must agree do not.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A tensor constructor got data whose length disagrees with the shape.
    DataLength { expected: usize, got: usize },
    /// An operation needs a different rank than it was given.
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    /// A convolution's output extent did not come out as a positive integer.
    InvalidConvGeometry {
        input: Vec<usize>,
        kernel: Vec<usize>,
        stride: usize,
        padding: usize,
    },
    /// `backward` was called on a non-scalar node.
    NonScalarLoss { shape: Vec<usize> },
    /// A normalized-attention score row was entirely zero with tau < 1.
    ZeroScoreRow { row: usize },
    /// A kernel extent is not divisible as the partition requires.
    NotDivisible {
        what: &'static str,
        extent: usize,
        by: usize,
    },
    /// A bounding box with non-positive width or height.
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    /// A non-finite value appeared where the caller requires finiteness.
    NonFinite { op: &'static str, index: usize },
    /// Catch-all for precondition violations with a formatted message.
    Invalid(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            Error::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            Error::RankMismatch { op, expected, got } => {
                write!(f, "{op}: expected rank {expected}, got shape {got:?}")
            }
            Error::InvalidConvGeometry {
                input,
                kernel,
                stride,
                padding,
            } => write!(
                f,
                "conv2d: input {input:?} with kernel {kernel:?}, stride {stride}, \
                 padding {padding} does not yield positive integral output extents"
            ),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward: loss must be scalar, got shape {shape:?}")
            }
            Error::ZeroScoreRow { row } => {
                write!(f, "naf: score row {row} is all-zero; normalization undefined")
            }
            Error::NotDivisible { what, extent, by } => {
                write!(f, "{what} extent {extent} is not divisible by {by}")
            }
            Error::DegenerateBox { x1, y1, x2, y2 } => {
                write!(f, "degenerate box ({x1}, {y1}, {x2}, {y2}): needs x1 < x2 and y1 < y2")
            }
            Error::NonFinite { op, index } => {
                write!(f, "{op}: non-finite value at coordinate {index}")
            }
            Error::Invalid(msg) => write!(f, "{msg}"),
        }
    }
}

impl core::error::Error for Error {}
