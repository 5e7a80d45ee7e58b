use thiserror::Error;

/// Errors raised by mesh construction, the implicit solvers and the integrators.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("iteration did not converge after {iterations} iterations (last residual {residual:.3e})")]
    Divergence { iterations: usize, residual: f64 },

    #[error("singular linearization in Newton step")]
    SingularJacobian,

    #[error("problem `{0}` carries no exact solution")]
    MissingExactSolution(String),

    #[error("insufficient history: need {needed} levels, have {available}")]
    InsufficientHistory { needed: usize, available: usize },

    #[error("stage {stage} failed at level {level}: {source}")]
    Step {
        stage: String,
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate relative estimate: reference stage value is zero at level {level}")]
    DegenerateEstimate { level: usize },

    #[error("adaptive stepping failed at t = {t}: {reason}")]
    Adaptive { t: f64, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
