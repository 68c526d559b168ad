//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("frozen parameters changed during {0}")]
    FrozenDrift(String),
    #[error(transparent)]
    Format(#[from] crate::io::FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Config { .. } => "config",
            Error::Invalid(_) => "invalid",
            Error::NonFiniteGrad(_) => "non_finite_grad",
            Error::FrozenDrift(_) => "frozen_drift",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
