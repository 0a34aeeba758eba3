use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("dataset row {row}: {message}")]
    DatasetRow { row: usize, message: String },

    #[error("non-finite loss at {stage} epoch {epoch}")]
    NonFinite { stage: String, epoch: usize },

    #[error("non-finite value in sample {index}")]
    NonFiniteSample { index: usize },

    #[error("frozen parameter group `{0}` changed during training")]
    FrozenDrift(String),

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("selector `{0}` matches no parameter group")]
    EmptySelection(String),

    #[error("codec artifact is a {actual}, this operation needs a {expected}")]
    WrongRole {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Latent(#[from] LatentFormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures while reading a `.hcl` latent file.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LatentFormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported latent file version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown quantization mode {0}")]
    UnknownMode(u8),
    #[error("file length {actual} does not match expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("latent shape {actual:?} does not match decoder shape {expected:?}")]
    Shape {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
