//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DdlError>;

#[derive(Debug, Error)]
pub enum DdlError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("layer {layer}, cell ({row}, {col}): {source}")]
    Cell {
        layer: usize,
        row: usize,
        col: usize,
        #[source]
        source: Box<DdlError>,
    },

    #[error("geometry error at layer {layer}: {msg}")]
    Geometry { layer: usize, msg: String },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("non-finite loss ({loss}) at epoch {epoch}, step {step}")]
    NonFiniteLoss { loss: f64, epoch: u64, step: usize },

    #[error("bracket failure: {0}")]
    Bracket(String),

    #[error("degenerate samples: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("gradient unavailable: {0}")]
    NoGradient(String),

    #[error(transparent)]
    Dataset(#[from] DatasetError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Failures while decoding IDX / CIFAR-10 binary files.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: bad magic number {found} (expected {expected})")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: file size {size} is not a multiple of the {record}-byte record")]
    FileSize {
        path: String,
        size: usize,
        record: usize,
    },

    #[error("{path}: label {label} outside [0, {classes})")]
    Label {
        path: String,
        label: usize,
        classes: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated checkpoint: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}
