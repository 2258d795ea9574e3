use thiserror::Error;

use crate::conic::ConicStatus;
use crate::sco::SolveLog;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A model evaluation left its domain (e.g. the car's square root argument
    /// went negative). `step` is filled in when the failure happens inside a
    /// rollout.
    #[error("domain error{}: {msg}", step.map(|k| format!(" at timestep {k}")).unwrap_or_default())]
    Domain { step: Option<usize>, msg: String },

    #[error("scenario validation failed: {0}")]
    Validation(String),

    #[error("conic subproblem returned {status:?} at inner iteration {iteration}")]
    InnerSolver { status: ConicStatus, iteration: usize },

    #[error("outer solve failed after {} iterations: {source}", log.records.len())]
    Solve {
        #[source]
        source: Box<Error>,
        log: Box<SolveLog>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn at_step(self, k: usize) -> Self {
        match self {
            Error::Domain { step: None, msg } => Error::Domain { step: Some(k), msg },
            other => other,
        }
    }
}
