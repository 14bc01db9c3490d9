use std::path::PathBuf;

use m2pt_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("region layout: {0}")]
    Layout(String),
    #[error("parameter registry: {0}")]
    Registry(String),
    #[error("split: {0}")]
    Split(String),
    #[error("config `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFiniteLoss { step: usize, batch: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
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
}
