use std::path::PathBuf;

use thiserror::Error;

/// Every fallible operation in the crate returns this error.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller broke an operation's precondition.
    #[error("contract violated: {0}")]
    Contract(String),

    /// Invalid configuration; `key` names the offending setting.
    #[error("invalid config `{key}`: {message}")]
    Config { key: String, message: String },

    /// Index outside a valid range (block index, task index, ...).
    #[error("{what} index {index} out of range (len {len})")]
    Range {
        what: &'static str,
        index: usize,
        len: usize,
    },

    /// Malformed weight or tensor container.
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    /// Raw image ingestion failed for a specific file.
    #[error("cannot ingest {path}: {message}")]
    Ingest { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors the CLI reports with the validation exit code.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
