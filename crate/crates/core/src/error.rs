use thiserror::Error;

use crate::expr::{EvalError, ParseError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("evaluation failed at {point:?}: {message}")]
    Evaluation { point: Vec<f64>, message: String },

    #[error("simulation produced a non-finite value on path {path} at step {step}: {message}")]
    Simulation {
        path: usize,
        step: usize,
        message: String,
    },

    #[error("solver failed at step {step}: {message}")]
    Solver { step: usize, message: String },

    #[error(
        "{fraction:.4} of paths did not leave the region before the horizon (limit {limit}); increase t_max"
    )]
    ExitTruncation { fraction: f64, limit: f64 },

    #[error("comparison violated at {location}: upper {upper} < lower {lower}")]
    ComparisonViolation {
        location: String,
        upper: f64,
        lower: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("standard error {se:.3e} exceeds the precision budget {budget:.3e}; use more paths")]
    Precision { se: f64, budget: f64 },

    #[error(
        "radius condition violated at state {state:?}: r = {radius}, dist to boundary = {distance}"
    )]
    RadiusCondition {
        state: Vec<f64>,
        radius: f64,
        distance: f64,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

impl Error {
    pub(crate) fn evaluation(point: &[f64], err: impl std::fmt::Display) -> Self {
        Error::Evaluation {
            point: point.to_vec(),
            message: err.to_string(),
        }
    }
}

impl From<EvalError> for Error {
    fn from(err: EvalError) -> Self {
        Error::Evaluation {
            point: Vec::new(),
            message: err.to_string(),
        }
    }
}
