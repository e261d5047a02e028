use thiserror::Error;

/// Errors raised by the simulation and analysis models.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An input lies outside the domain where the model is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke a documented contract (for example a step size limit).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A linear solve, integrator or state update produced an unusable result.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An iterative procedure did not settle within its budget.
    #[error("not converged: {0}")]
    Convergence(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
