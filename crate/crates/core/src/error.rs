use std::path::PathBuf;

use thiserror::Error;

/// All failure modes surfaced by this crate.
#[derive(Debug, Error)]
pub enum CscaError {
    /// Filesystem failure, annotated with the offending path.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A CSV or JSON row that does not conform to the expected schema.
    /// `row` is 1-based and counts the header as row 1.
    #[error("{path}:{row}: {detail}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        detail: String,
    },

    /// The same record id appeared more than once in one manifest.
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    /// A content label outside the fixed five-way vocabulary.
    #[error("unknown content label `{0}` (expected one of: object, plant, animal, human, other)")]
    UnknownLabel(String),

    /// A split name outside the fixed six-way vocabulary.
    #[error("unknown split `{0}` (expected one of: train, val, test, rg1, rg2, fg)")]
    UnknownSplit(String),

    /// Rating normalization is impossible because the source split has a
    /// single distinct raw rating.
    #[error("degenerate ratings in `{split}` split: min == max == {value}")]
    DegenerateRatings { split: String, value: f64 },

    /// An operation received an empty collection where at least one element
    /// is required.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Fewer samples than the operation can support.
    #[error("{context}: need at least {needed} samples, got {got}")]
    TooFewSamples {
        context: String,
        needed: usize,
        got: usize,
    },

    /// A correlation over a constant vector is undefined.
    #[error("constant input: correlation is undefined ({0})")]
    ConstantInput(String),

    /// A NaN or infinity reached a numeric kernel.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Tensor or embedding shapes disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Image decode or pixel-level failure.
    #[error("image error for {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    /// Invalid run configuration or command usage.
    #[error("configuration error: {0}")]
    Config(String),

    /// Checkpoint serialization, validation, or compatibility failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Encoder bundle construction or weight-file failure.
    #[error("backbone error: {0}")]
    Backbone(String),
}

impl CscaError {
    /// Wraps an io error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CscaError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CscaError>;
