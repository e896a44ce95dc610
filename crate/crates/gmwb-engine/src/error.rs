//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("withdrawal schedule never exhausts the premium: total withdrawals {total} < f0 = {f0}")]
    ScheduleShortfall { total: f64, f0: f64 },

    #[error("ensemble extinct after resampling at step {step}: every offspring count was zero")]
    Extinction { step: usize },

    #[error("normal pool exhausted: requested {requested} draws, {available} remaining")]
    PoolExhausted { requested: usize, available: usize },

    #[error(
        "fair-fee bracket does not straddle zero: liability({lo}) = {pi_lo}, liability({hi}) = {pi_hi}"
    )]
    BracketFailure {
        lo: f64,
        hi: f64,
        pi_lo: f64,
        pi_hi: f64,
    },

    #[error("empty loss distribution")]
    EmptyDistribution,

    #[error("degenerate tail: no sample lies strictly above the {zeta}-quantile")]
    DegenerateTail { zeta: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable discriminant for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Config(_) => "config",
            Error::ScheduleShortfall { .. } => "schedule_shortfall",
            Error::Extinction { .. } => "extinction",
            Error::PoolExhausted { .. } => "pool_exhausted",
            Error::BracketFailure { .. } => "bracket_failure",
            Error::EmptyDistribution => "empty_distribution",
            Error::DegenerateTail { .. } => "degenerate_tail",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
