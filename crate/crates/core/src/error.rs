use std::io;

use thiserror::Error;

/// Every failure the library reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// True for errors caused by a bad model/run configuration rather than
    /// by input data or the environment.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Param(_) | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
