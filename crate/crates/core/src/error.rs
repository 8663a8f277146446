use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A count fell outside the finite support `{0, ..., threshold}`.
    #[error("count {value} outside support 0..={threshold}")]
    OutOfSupport { value: i64, threshold: u32 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A linear predictor exceeded the overflow guard.
    #[error("linear predictor {eta:.3} at row {row} exceeds overflow guard")]
    RateOverflow { row: usize, eta: f64 },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("fit failed: {0}")]
    Fit(String),

    /// Malformed input; `line` is 1-based and counts the header.
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
