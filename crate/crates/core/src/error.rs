use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A precondition on argument values was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A mathematically undefined evaluation (log of a non-positive value,
    /// division by zero, normalization of a zero vector).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A loss term became NaN or infinite during training.
    #[error("non-finite {term} loss at step {step}")]
    NonFinite { step: u64, term: &'static str },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file was readable but its contents are not a valid container.
    #[error("bad file format in {path} (format version {version}): {detail}")]
    Format {
        path: PathBuf,
        version: u32,
        detail: String,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidInput(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
