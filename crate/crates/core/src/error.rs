use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DmpError>;

#[derive(Debug, Error)]
pub enum DmpError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("data error in {path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("duplicate gate registration: {0}")]
    DuplicateGate(String),

    #[error("unknown gradient-check op `{name}` (known: {known})")]
    UnknownOp { name: String, known: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DmpError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        DmpError::Shape(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        DmpError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
