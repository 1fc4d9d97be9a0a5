//! Error type shared by every module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("callback `{name}` failed: {detail}")]
    CallbackFailure { name: String, detail: String },

    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    #[error("particle {particle} blew up at step {step}{} (|x| = {magnitude:e})", iteration.map(|i| format!(" of Picard iteration {i}")).unwrap_or_default())]
    BlowUp { step: usize, particle: usize, magnitude: f64, iteration: Option<usize> },

    #[error("singular regression at step {step}")]
    SingularRegression { step: usize },

    #[error("{what} did not converge after {iterations} iterations (last change {last_change:e})")]
    NoConvergence {
        what: String,
        iterations: usize,
        last_change: f64,
        report: Option<Box<crate::solver::SolverReport>>,
    },

    #[error("missing second derivatives: {0}")]
    MissingDerivatives(String),

    #[error("control is not admissible: {0}")]
    NonAdmissible(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("operation unsupported: {0}")]
    OperationUnsupported(String),

    #[error("Riccati solution blew up at t = {t}")]
    RiccatiBlowUp { t: f64 },

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { path: path.into(), message: message.into() }
    }

    pub fn domain(message: impl Into<String>) -> Self {
        Error::Domain(message.into())
    }
}
