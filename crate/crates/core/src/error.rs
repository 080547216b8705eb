use chrono::NaiveDate;
use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors shared across the calibration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A scale matrix is not symmetric positive definite.
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A training case has zero density under every mixture component.
    #[error("degenerate likelihood at station {station}, date {date}")]
    DegenerateLikelihood { station: String, date: NaiveDate },

    /// The weighted member Gram matrix cannot be inverted.
    #[error("rank-deficient training data: {0}")]
    RankDeficient(String),

    /// EM produced non-finite parameters.
    #[error("EM diverged: {0}")]
    Divergence(String),

    /// Too few historical cases for latent correlation estimation.
    #[error("insufficient history: {got} valid pairs, need at least {need}")]
    InsufficientHistory { got: usize, need: usize },

    /// Forecast member count does not match the group specification.
    #[error("member count mismatch: forecast has {got}, grouping expects {expected}")]
    MemberMismatch { got: usize, expected: usize },

    /// Dataset file could not be parsed.
    #[error("load error at line {line}: {reason}")]
    Load { line: usize, reason: String },

    /// Invalid run or generator configuration.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// An operation received an empty input it cannot handle.
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
