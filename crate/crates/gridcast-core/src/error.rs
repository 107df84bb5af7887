//! Error type shared across the crate.

use alloc::string::String;
use alloc::vec::Vec;

/// All failure modes of the core engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor data length does not match the product of the shape.
    #[error("data length {got} does not match shape product {expected}")]
    LengthMismatch { expected: usize, got: usize },

    /// A non-finite value was rejected.
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    /// Operand shapes are incompatible for an operation.
    #[error("{op}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A lookup index fell outside its table.
    #[error("{what}: index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    /// Backward was requested from a non-scalar node.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalarLoss { shape: Vec<usize> },

    /// An example window does not fit inside its day.
    #[error(
        "window [{start}, {end}) for day {day} does not fit in {frames_per_day} frames per day"
    )]
    WindowOutOfRange {
        day: usize,
        start: isize,
        end: usize,
        frames_per_day: usize,
    },

    /// A predictor is missing required context frames.
    #[error("missing context: {what}")]
    MissingContext { what: String },

    /// Invalid configuration value.
    #[error("invalid configuration: {message}")]
    Config { message: String },

    /// A gradient came back non-finite for a named parameter.
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    /// Every trial of a search diverged.
    #[error("all trials diverged")]
    AllTrialsDiverged,
}

impl Error {
    pub fn config(message: impl Into<String>) -> Self {
        Error::Config {
            message: message.into(),
        }
    }
}
