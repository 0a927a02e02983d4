use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value in {what} at position {position}")]
    NonFinite { what: String, position: usize },

    #[error("failed to load sample `{sample}`: {reason}")]
    Load { sample: String, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("collate error: {0}")]
    Collate(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (L_cd = {l_cd:?}, L_cc = {l_cc:?})")]
    NonFiniteLoss { step: usize, l_cd: Option<f64>, l_cc: Option<f64> },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
