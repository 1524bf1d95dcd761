use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("index error: {0}")]
    Index(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("capacity error: history length {len} reached max_context {max}")]
    Capacity { len: usize, max: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("format error in tensor `{tensor}`: {reason}")]
    Format { tensor: String, reason: String },
    #[error("attribute error: {0}")]
    Attribute(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact: {}", .0.display())]
    MissingPath(PathBuf),
    #[error("invalid value for `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
