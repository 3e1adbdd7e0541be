use thiserror::Error;

/// Errors raised across the characterization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("channel is not trace preserving (first-row deviation {0:.3e})")]
    NotTracePreserving(f64),

    #[error("invalid Clifford index {0} (expected 0..24)")]
    InvalidCliffordIndex(usize),

    #[error("Cayley table lookup failed for ({0}, {1})")]
    GroupTable(usize, usize),

    #[error("optimizer did not converge after {iterations} iterations (cost {cost:.3e})")]
    NotConverged { iterations: usize, cost: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("transfer function does not cover frequency {0:.6e} Hz")]
    GridCoverage(f64),

    #[error("non-physical result: {0}")]
    NonPhysical(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
