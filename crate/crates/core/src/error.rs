//! Error types shared across the engine.

use thiserror::Error;

/// Errors raised by tensor and autodiff operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },
    #[error("invalid padding/stride: output extent would be non-positive ({context})")]
    InvalidPadding { context: String },
    #[error("unsupported extent: {0}")]
    UnsupportedExtent(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("batch norm eval mode requested before any running statistics exist")]
    UninitializedStatistics,
    #[error("missing gradient for parameter '{0}'")]
    MissingGradient(String),
}

/// Errors raised while reading or writing checkpoints.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint file: {0}")]
    Truncated(String),
    #[error("dtype mismatch: checkpoint stores {stored}, expected {expected}")]
    DtypeMismatch { stored: String, expected: String },
    #[error("parameter set mismatch: {0}")]
    NameSetMismatch(String),
    #[error("malformed metadata: {0}")]
    Metadata(String),
}

/// Errors raised by the data pipeline.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest {path}:{line}: {message}")]
    Manifest {
        path: String,
        line: usize,
        message: String,
    },
    #[error("unknown label '{label}' at {path}:{line}")]
    UnknownLabel {
        label: String,
        path: String,
        line: usize,
    },
    #[error("duplicate sample path '{sample}' at {path}:{line}")]
    DuplicatePath {
        sample: String,
        path: String,
        line: usize,
    },
    #[error("missing image file: {0}")]
    MissingImage(String),
    #[error("cannot decode image {path}: {message}")]
    Decode { path: String, message: String },
    #[error("split '{0}' is empty")]
    EmptySplit(String),
    #[error("invalid split fractions: {0}")]
    Fractions(String),
    #[error("configuration error: {0}")]
    Config(String),
}

/// Errors raised by metric computation and the scoring stack.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate normalization range for column '{0}' (all values equal)")]
    DegenerateRange(String),
    #[error("configuration error: {0}")]
    Config(String),
}

/// Errors raised by the training runtime.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("vocabulary mismatch: checkpoint classes {checkpoint:?} vs manifest classes {manifest:?}")]
    VocabularyMismatch {
        checkpoint: Vec<String>,
        manifest: Vec<String>,
    },
}
