use thiserror::Error;

use crate::dynamics::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("rollout diverged: non-finite state at step {step}")]
    RolloutDivergence { step: usize },

    #[error("covariance of mixture component {component} is not symmetric positive definite")]
    NotPositiveDefinite { component: usize },

    #[error(
        "Sinkhorn marginal violation {violation:.3e} exceeds {limit:.3e}; gradient is untrustworthy"
    )]
    UnconvergedTransport { violation: f64, limit: f64 },

    #[error("Riccati sweep produced non-finite values at time index {step}; try a smaller dt")]
    RiccatiInstability { step: usize },

    #[error("planning failed at iteration {iteration}: {source}")]
    Plan {
        iteration: usize,
        /// Last trajectory whose rollout succeeded.
        last_good: Box<Trajectory>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Short machine-readable tag, used in benchmark status columns.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::RolloutDivergence { .. } => "rollout_divergence",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::UnconvergedTransport { .. } => "unconverged_transport",
            Error::RiccatiInstability { .. } => "riccati_instability",
            Error::Plan { source, .. } => source.tag(),
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}
