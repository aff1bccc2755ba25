use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported field: {0}")]
    UnsupportedField(String),
    #[error("size mismatch: expected {expected} bytes, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("decode error: {0}")]
    DecodeError(String),
    #[error("malformed row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("no valid cube placement: {0}")]
    NoValidPlacement(String),
    #[error("malformed npy: {0}")]
    MalformedNpy(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("incompatible layer shapes: {0}")]
    ShapeIncompatible(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no scans found in {}", .0.display())]
    NoScans(PathBuf),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint CRC mismatch (file truncated or corrupt)")]
    CrcMismatch,
    #[error("volume too small: {0}")]
    VolumeTooSmall(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
