//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),

    #[error("architecture descriptor mismatch: expected {expected}, found {found}")]
    DescriptorMismatch { expected: String, found: String },

    #[error("container version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("non-finite loss at step {step}, iteration {iter}: {detail}")]
    NonFiniteLoss {
        step: usize,
        iter: usize,
        detail: String,
    },

    #[error("config hash mismatch on resume: run directory holds {stored}, requested {requested}")]
    ResumeMismatch { stored: String, requested: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
