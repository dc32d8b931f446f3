use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{path}: expected {expected} bytes, found {actual}")]
    FileSize {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: record {record} has label byte {label}, expected at most {max}")]
    BadLabel {
        path: PathBuf,
        record: usize,
        label: u8,
        max: u8,
    },

    #[error("checkpoint error at byte offset {offset}: {message}")]
    Checkpoint { offset: usize, message: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("visualization error: {0}")]
    Viz(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
