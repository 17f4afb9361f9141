//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by any layer of the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix shapes are incompatible for the requested operation.
    #[error("dimension mismatch in {op}: left is {left}, right is {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    /// An index (label, class id, row) is out of range.
    #[error("index out of range in {op}: {index} not below {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    /// A configuration value is invalid or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was attempted in a state that forbids it.
    #[error("invalid state: {0}")]
    State(String),

    /// A caller violated an operation's contract.
    #[error("contract violation in {op}: {message}")]
    Contract { op: &'static str, message: String },

    /// Numerical failure: non-finite value, non-convergence, degenerate input.
    #[error("numeric error in {op}: {message}")]
    Numeric { op: &'static str, message: String },

    /// Too few samples for a statistical estimate.
    #[error("{op} needs at least {required} samples, got {got}")]
    InsufficientSamples {
        op: &'static str,
        required: usize,
        got: usize,
    },

    /// A text input (CSV row, config file) failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The phase protocol parameters are inconsistent.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Evaluation could not be carried out.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for configuration-shaped failures; the CLI maps these to exit 1
    /// and everything else to exit 2.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Protocol(_) | Error::Parse { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
