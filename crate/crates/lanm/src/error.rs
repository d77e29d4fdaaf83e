//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the named tape operation.
    #[error("{op}: shape mismatch between {lhs_rows}x{lhs_cols} and {rhs_rows}x{rhs_cols}")]
    Shape {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// A single operand is invalid for the named operation.
    #[error("{op}: invalid operand of shape {rows}x{cols}: {msg}")]
    Operand {
        op: &'static str,
        rows: usize,
        cols: usize,
        msg: String,
    },

    /// A NaN or infinity appeared where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Invalid configuration or schema violation.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed input data (bad CSV cell, inconsistent rows, ...).
    #[error("invalid data: {0}")]
    Data(String),

    /// Dimensions of two artifacts disagree (dataset vs model, ...).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A numerical procedure failed (training aborted, singular system, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// JSON (de)serialization failure; treated as a schema violation.
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },

    /// A binary array file is corrupt or has the wrong magic/version.
    #[error("{path}: not a valid array file: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
