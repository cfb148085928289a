use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular interaction: particles at distance {distance:e}")]
    Singularity { distance: f64 },

    #[error("particle count mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("shift infeasible: radius {radius} exceeds 2|V0| = {limit} after {attempts} draws")]
    ShiftInfeasible {
        radius: f64,
        limit: f64,
        attempts: usize,
    },

    #[error("all {samples} Monte Carlo samples rejected ({reasons})")]
    AllSamplesRejected { samples: usize, reasons: String },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
