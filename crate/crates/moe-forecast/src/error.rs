//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error enum. Variants carry enough structure for callers to
/// report exactly what went wrong without string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix multiply shape mismatch: left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    MatmulShape {
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("zero dimension: requested {rows}x{cols} matrix")]
    ZeroDimension { rows: usize, cols: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("empty batch passed to {context}")]
    EmptyBatch { context: String },

    #[error("invalid configuration: {reason}")]
    InvalidConfig { reason: String },

    #[error("expert index {index} out of range 1..={num_experts}")]
    ExpertIndex { index: usize, num_experts: usize },

    #[error("mask for expert {expert} leaves no samples in a batch of {batch_size}")]
    EmptyMask { expert: usize, batch_size: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Diverged { epoch: usize, batch: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("series '{series}' contains missing values and imputation is disabled")]
    MissingValues { series: String },

    #[error("series '{series}' is too short: length {length}, need at least {required}")]
    SeriesTooShort {
        series: String,
        length: usize,
        required: usize,
    },

    #[error("insufficient data: need at least {required} observations, have {available}")]
    InsufficientData { required: usize, available: usize },

    #[error("seasonal-naive denominator is zero: in-sample series is constant at lag {period}")]
    ZeroScaleDenominator { period: usize },

    #[error("normal equations are rank-deficient beyond the ridge jitter (pivot {pivot:.3e} at column {column})")]
    RankDeficient { pivot: f64, column: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
