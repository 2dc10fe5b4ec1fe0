use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {got} does not match shape {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },
    #[error("{what}: length {len} outside [{min}, {max}]")]
    Length {
        what: &'static str,
        len: usize,
        min: usize,
        max: usize,
    },
    #[error("{what}: index {index} outside [{min}, {max}]")]
    Index {
        what: &'static str,
        index: usize,
        min: usize,
        max: usize,
    },
    #[error("invalid config `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },
    #[error("input of length {len} activates no layers")]
    UnsupportedLength { len: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("need at least 2 usable features, got {got}")]
    InsufficientFeatures { got: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unknown parameter `{0}`")]
    MissingParameter(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used to pick process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } | Error::Checkpoint(_) | Error::MissingParameter(_) => {
                ErrorKind::Config
            }
            Error::NonFinite { .. } | Error::Shape { .. } | Error::DataLength { .. } => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Data,
        }
    }
}
