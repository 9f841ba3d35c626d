use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FrugalError>;

#[derive(Debug, Error)]
pub enum FrugalError {
    #[error("pixel ({u}, {v}) outside image bounds {width}x{height}")]
    OutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("non-finite value in loss term `{term}` at iteration {iteration}")]
    NonFinite { term: String, iteration: usize },

    #[error("io error on {path}: {source}")]
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

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl FrugalError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FrugalError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        FrugalError::Json {
            context: context.into(),
            source,
        }
    }
}
