use thiserror::Error;

use crate::expr::{DiffError, EvalError, ParseError};
use crate::quadrature::{Decision, QuadError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("x = {x} is out of domain: {reason}")]
    OutOfDomain { x: f64, reason: String },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("finiteness routes disagree: via Y {y}, via Z {z}")]
    RouteDisagreement { y: Decision, z: Decision },
    #[error("simulation failed: {0}")]
    Simulation(String),
    #[error("unknown model family `{0}`")]
    UnknownFamily(String),
    #[error("invalid JSON: {0}")]
    Json(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}
