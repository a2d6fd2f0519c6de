use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        column: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid utility parameters: {0}")]
    Utility(String),

    #[error("nondifferentiable point")]
    NonDifferentiable,

    #[error("exponential overflow while evaluating the utility")]
    Overflow,

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
        last: Vec<f64>,
    },

    #[error("scenario {scenario}: {source}")]
    Scenario {
        scenario: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("dual variable hit the bracket floor in scenario {0}; the pricing measure would not be equivalent to P")]
    DualFloor(usize),

    #[error("Q outside finite-entropy domain")]
    InfiniteDual,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("assembly failed: {0}")]
    Assembly(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_scenario(self, scenario: usize) -> Self {
        match self {
            Error::Scenario { .. } => self,
            other => Error::Scenario {
                scenario,
                source: Box::new(other),
            },
        }
    }

    pub(crate) fn non_convergence(
        what: &'static str,
        iterations: usize,
        residual: f64,
        last: &[f64],
    ) -> Self {
        Error::NonConvergence {
            what,
            iterations,
            residual,
            last: last.to_vec(),
        }
    }
}
