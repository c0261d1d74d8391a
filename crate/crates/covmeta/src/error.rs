//! Library-wide error type and the CLI exit-code mapping.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes fed to an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Argument outside an operation's mathematical domain (log of a
    /// non-positive value, sigma <= 0, ...).
    #[error("domain error in {op}: {message}")]
    Domain { op: &'static str, message: String },

    /// An operation produced NaN or +-Inf; the producing op is named.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// Training hit a non-finite loss or gradient.
    #[error("numerical failure at outer step {step}: non-finite {component}")]
    NumericalFailure { step: usize, component: String },

    /// Bad run configuration or CLI arguments.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed or inconsistent input (shapes aside).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Checkpoint serialization/validation problems.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset file problems.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for validation problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::NumericalFailure { .. } | Error::Domain { .. } => 2,
            _ => 1,
        }
    }
}
