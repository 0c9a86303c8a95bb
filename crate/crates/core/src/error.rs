use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unsupported image format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("failed to decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("instance bank is empty: the dataset contains no labeled instances")]
    EmptyBank,

    #[error("no bank entry satisfies the template filter")]
    NoCandidate,

    #[error("mask is empty")]
    EmptyMask,

    #[error("image has no instances to anchor placements")]
    NoAnchor,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("placement out of bounds: {0}")]
    OutOfBounds(String),

    #[error("label id space exhausted (max 65535)")]
    LabelOverflow,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("spectral normalization of a zero matrix")]
    ZeroMatrix,

    #[error("template region present but no original-instance region to attend to")]
    NoOriginalRegion,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("smooth stage requested without a generator checkpoint")]
    MissingCheckpoint,

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("malformed record: {0}")]
    Malformed(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
