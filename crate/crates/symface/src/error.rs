//! Crate-wide error type and result alias.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-finite value in term `{term}`")]
    NonFinite { term: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset integrity: {0}")]
    Integrity(String),

    #[error("organ `{organ}` not found on {side} side")]
    OrganNotFound { organ: String, side: String },

    #[error(
        "mask generation failed after {attempts} attempts: best hole fraction {achieved:.4} outside [{lo:.4}, {hi:.4}]"
    )]
    MaskGeneration {
        achieved: f64,
        lo: f64,
        hi: f64,
        attempts: usize,
    },

    #[error("segmentation failed: {0}")]
    Segmentation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Parameter(_) | Error::Shape(_) | Error::Config(_) => 2,
            Error::Numeric(_) | Error::NonFinite { .. } => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
