//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Field construction or combination with inconsistent shapes.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Masks differ where an operation requires them to agree.
    #[error("mask mismatch: {0}")]
    MaskMismatch(String),

    /// A field carried a non-finite value at a valid position.
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    /// An operation over valid pixels found none.
    #[error("no valid pixels")]
    NoValidPixels,

    /// Least-squares fit with a constant (zero-variance) predictor.
    #[error("degenerate fit")]
    DegenerateFit,

    /// Depth normalization with equal percentile anchors.
    #[error("degenerate depth range")]
    DegenerateDepthRange,

    /// An ensemble member is constant and cannot be min-max initialized.
    #[error("degenerate member")]
    DegenerateMember,

    /// Stack channel count differs from what the operation requires.
    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    /// Normal vectors deviate from unit length beyond tolerance.
    #[error("non-unit normal vectors (max deviation {max_dev})")]
    NonUnitNormals { max_dev: f64 },

    /// Ground-truth depth must be strictly positive for ratio metrics.
    #[error("non-positive depth value {value} at valid pixel")]
    NonPositiveDepth { value: f64 },

    /// An argument is outside its documented range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A denoiser's channel signature does not match the pipeline layout.
    #[error("denoiser signature mismatch: {0}")]
    SignatureMismatch(String),

    /// A canvas pixel is not covered by any tile.
    #[error("uncovered canvas pixel at ({row}, {col})")]
    UncoveredPixel { row: usize, col: usize },

    /// Training loss exceeded 10x the initial loss for 100 consecutive
    /// iterations; the recorded loss trace is attached.
    #[error("training diverged after {} iterations", trace.len())]
    TrainingDiverged { trace: Vec<f64> },

    /// Denoiser file with a bad magic, version, or payload length.
    #[error("malformed denoiser file: {0}")]
    MalformedFile(String),

    /// Underlying I/O failure while reading or writing a denoiser file.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
