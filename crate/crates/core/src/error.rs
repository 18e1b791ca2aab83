//! Error types shared across the engine.
//!
//! Variants are grouped by how a caller should react: configuration problems
//! are user-fixable before any compute starts, data problems concern the
//! input corpus, format problems concern serialized artifacts, and numeric
//! problems mean the math itself went off the rails (shape contract
//! violations, non-finite values, divergent training).

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Invalid configuration or hyperparameter combination.
    #[error("config error: {0}")]
    Config(String),

    /// Problem with the input data itself (schema, ordering, coverage).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed serialized artifact (tensor file, checkpoint, manifest).
    #[error("format error at byte {offset} in {path}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    /// Shape or contract violation in a numeric op.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite value or divergent optimization.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    /// Process exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::Config(_) => 2,
            CoreError::Data(_) | CoreError::Format { .. } | CoreError::Io { .. } => 3,
            CoreError::Shape(_) | CoreError::Numeric(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
