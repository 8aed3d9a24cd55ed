use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Dataset {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at batch {batch}: {detail}")]
    NonFiniteLoss { batch: usize, detail: String },

    #[error("evaluation input mismatch: {0}")]
    EvalMismatch(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}
