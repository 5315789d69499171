use std::path::PathBuf;

use thiserror::Error;

/// Errors produced while loading configurations or evaluating a mapping.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {what}: {source}")]
    Parse {
        what: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("logical shape {rows}x{cols} is not legal for a {phys_rows}x{phys_cols} array")]
    IllegalShape {
        rows: u64,
        cols: u64,
        phys_rows: u64,
        phys_cols: u64,
    },

    #[error("tile {m}x{spatial} exceeds logical capacity {rows}x{cols}")]
    TileTooLarge {
        m: usize,
        spatial: usize,
        rows: u64,
        cols: u64,
    },

    #[error("operand shapes do not agree: {0}")]
    ShapeMismatch(String),

    #[error("tile refill of {bytes} bytes exceeds buffer capacity of {capacity} bytes")]
    BufferCapacity { bytes: u64, capacity: u64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }
}
