use std::path::PathBuf;

use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("{path}, row {row}: {message}")]
    DataRow { path: PathBuf, row: usize, message: String },

    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("non-finite loss in sample {sample}, window {window}: {terms}")]
    NonFiniteLoss {
        sample: usize,
        window: usize,
        terms: String,
    },

    #[error("sample-tuple count {count} exceeds the configured cap {cap}")]
    SampleCap { count: usize, cap: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that happen during computation rather than
    /// while validating inputs.
    pub fn is_runtime(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. } | Error::Io { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
