//! Error type shared by all modules.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model or scenario invariant failed validation. `name` is the
    /// invariant as reported by `validate` ("connectivity", "channel
    /// completeness", "bound ordering", "profile length", ...).
    #[error("invariant '{name}' violated: {detail}")]
    Invariant { name: &'static str, detail: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("jacobian singular (pivot {pivot:.3e} below {tol:.3e})")]
    JacobianSingular { pivot: f64, tol: f64 },

    #[error("newton did not converge in {max_iter} iterations (last residual {residual:.3e})")]
    NewtonMaxIter { max_iter: usize, residual: f64 },

    #[error("residual radius exceeded: ||h||_2 = {norm:.3e} > {radius:.3e}")]
    ResidualRadius { norm: f64, radius: f64 },

    #[error("invalid measurement channel: {0}")]
    Measurement(String),

    #[error("non-finite measurement at channel {0}")]
    NonFiniteMeasurement(usize),

    #[error("degenerate prior: P + Sigma_omega is singular (pivot {pivot:.3e})")]
    DegeneratePrior { pivot: f64 },

    #[error("qp infeasible")]
    QpInfeasible,

    #[error("qp did not converge in {max_iter} iterations (kkt residual {residual:.3e})")]
    QpMaxIter { max_iter: usize, residual: f64 },

    #[error("qp numerical failure: {0}")]
    QpNumerical(String),

    #[error("opf solver did not converge in {max_iter} iterations (step {step:.3e})")]
    OpfMaxIter { max_iter: usize, step: f64 },

    #[error("no feasible point on the brute-force grid")]
    NoFeasiblePoint,

    #[error("scenario aborted at step {step}: {source} [{diagnostic}]")]
    Aborted {
        step: usize,
        #[source]
        source: Box<Error>,
        diagnostic: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical machinery (exit code 3 at the
    /// CLI), false for configuration and validation problems (exit code 2).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::JacobianSingular { .. }
            | Error::NewtonMaxIter { .. }
            | Error::ResidualRadius { .. }
            | Error::NonFiniteMeasurement(_)
            | Error::DegeneratePrior { .. }
            | Error::QpInfeasible
            | Error::QpMaxIter { .. }
            | Error::QpNumerical(_)
            | Error::OpfMaxIter { .. }
            | Error::NoFeasiblePoint => true,
            Error::Aborted { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// Step index when the error happened inside a scenario run.
    pub fn step(&self) -> Option<usize> {
        match self {
            Error::Aborted { step, .. } => Some(*step),
            _ => None,
        }
    }
}
