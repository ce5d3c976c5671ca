use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("fitting error: {0}")]
    Fit(String),

    #[error("cannot invert a cost model with zero per-unit cost")]
    Inversion,

    #[error("invalid pipeline degree {0} (must be >= 1)")]
    InvalidDegree(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
