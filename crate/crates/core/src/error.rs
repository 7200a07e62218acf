use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("need at least {needed} seeds, got {got}")]
    InsufficientSeeds { needed: usize, got: usize },
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("rank-deficient configuration: {0}")]
    RankDeficient(String),
    #[error("no pose places the points in front of the camera")]
    Cheirality,
    #[error("degenerate motion: {0}")]
    DegenerateMotion(String),
    /// The objective became non-finite. `iterate` holds the last finite
    /// parameter vector.
    #[error("numerical failure at iteration {iteration}: {message}")]
    NumericalFailure {
        iteration: usize,
        message: String,
        iterate: Vec<f64>,
    },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("scene error: {0}")]
    Scene(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Short, stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::BehindCamera { .. } => "behind-camera",
            Error::InsufficientSeeds { .. } => "insufficient-seeds",
            Error::InsufficientData { .. } => "insufficient-data",
            Error::RankDeficient(_) => "rank-deficient",
            Error::Cheirality => "cheirality",
            Error::DegenerateMotion(_) => "degenerate-motion",
            Error::NumericalFailure { .. } => "numerical-failure",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Scene(_) => "scene",
            Error::Parse(_) => "parse",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn dims(expected: (usize, usize), got: (usize, usize)) -> Self {
        Error::DimensionMismatch { expected, got }
    }
}
