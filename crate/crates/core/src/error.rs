use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("batch-statistics normalization needs at least 2 rows, got {rows}")]
    BatchTooSmall { rows: usize },

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(
        "parameter budget exceeded for {branch} branch: {trainable} trainable of {total} ({ratio:.4} >= 0.01); \
         widen the hidden layers to at least {suggested_width}"
    )]
    Budget {
        branch: &'static str,
        trainable: usize,
        total: usize,
        ratio: f64,
        suggested_width: usize,
    },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
