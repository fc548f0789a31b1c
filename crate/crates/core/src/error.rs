use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate ({x1}, {x2}) lies outside the grid bounds")]
    OutOfBounds { x1: f64, x2: f64 },

    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid has no valid entries")]
    NoValidEntries,

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("path-loss design matrix is rank deficient (all samples equidistant from the base station)")]
    RankDeficient,

    #[error("base station coincides with cell ({row}, {col}); log-distance mean is undefined there")]
    ZeroDistance { row: usize, col: usize },

    #[error("covariance matrix is not positive definite even after jitter")]
    NotPositiveDefinite,

    #[error("grid too large for dense shadowing ({cells} cells, limit {limit}); use tiled generation")]
    GridTooLarge { cells: usize, limit: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layer {layer}: {reason}")]
    Layer { layer: usize, reason: String },

    #[error("could not parse network structure {input:?}: {reason}")]
    Structure { input: String, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("model file: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
