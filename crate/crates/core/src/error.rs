use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {what} {index} out of range 0..{bound}")]
    Index { what: &'static str, index: usize, bound: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("deserialization error in field `{field}`: {reason}")]
    Deserialize { field: String, reason: String },

    #[error("{path}: {source}")]
    File { path: PathBuf, #[source] source: Box<Error> },

    #[error("training aborted at step {step}: {reason}")]
    Aborted { step: usize, reason: String, record: Box<crate::trainer::StepRecord> },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn deserialize(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Deserialize { field: field.into(), reason: reason.into() }
    }

    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File { path: path.into(), source: Box::new(self) }
    }

    /// True for errors caused by invalid user-supplied configuration.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::File { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
