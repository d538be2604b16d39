use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("entry {index} is negative ({value})")]
    NegativeEntry { index: usize, value: f64 },

    #[error("entry {index} must be strictly positive ({value})")]
    NonPositiveEntry { index: usize, value: f64 },

    #[error("lambert W0 argument {0} is below -1/e")]
    LambertDomain(f64),

    #[error("invalid trade function: {0}")]
    InvalidTradeFunction(String),

    #[error("invalid market {market}: {reason}")]
    InvalidMarket { market: usize, reason: String },

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("activation vector is not binary at market {0}")]
    NonBinaryActivation(usize),

    #[error("exact enumeration supports at most {max} markets, got {m}")]
    TooManyMarkets { m: usize, max: usize },

    #[error("invalid solver options: {0}")]
    InvalidOptions(String),

    #[error("invalid sweep: {0}")]
    InvalidSweep(String),

    #[error(
        "plan violates the non-overlapping support condition at market {market}, asset {asset}"
    )]
    SupportViolation { market: usize, asset: usize },

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
