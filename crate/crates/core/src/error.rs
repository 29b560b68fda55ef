//! Crate-wide error type.

use std::fmt;

/// Errors reported by tensor operations, layers, builders, training,
/// evaluation and I/O.
#[derive(Debug)]
pub enum Error {
    /// Two operand shapes do not conform for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operation produced or was asked to divide by zero.
    DivisionByZero { op: &'static str },
    /// An operation produced a NaN or infinity.
    NonFinite { op: &'static str, detail: String },
    /// `backward` called on a non-scalar root.
    NonScalarRoot { shape: Vec<usize> },
    /// Invalid argument or configuration value.
    InvalidArg(String),
    /// Dataset loading or splitting failed.
    Dataset(String),
    /// Checkpoint encoding/decoding failed.
    Checkpoint(String),
    /// Training aborted; carries the last good checkpoint path if any.
    TrainAborted {
        iter: u64,
        detail: String,
        last_checkpoint: Option<String>,
    },
    /// Underlying I/O error with the path that failed.
    Io { path: String, source: std::io::Error },
    /// Text parsing failed (PPM/PGM headers, CSV, JSON configs).
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::DivisionByZero { op } => write!(f, "{op}: division by zero"),
            Error::NonFinite { op, detail } => write!(f, "{op}: non-finite result ({detail})"),
            Error::NonScalarRoot { shape } => {
                write!(f, "backward: root must be scalar, got shape {shape:?}")
            }
            Error::InvalidArg(msg) => write!(f, "invalid argument: {msg}"),
            Error::Dataset(msg) => write!(f, "dataset: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
            Error::TrainAborted {
                iter,
                detail,
                last_checkpoint,
            } => {
                write!(f, "training aborted at iteration {iter}: {detail}")?;
                if let Some(p) = last_checkpoint {
                    write!(f, " (last good checkpoint: {p})")?;
                }
                Ok(())
            }
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
