//! Error type shared across the crate.
//!
//! Every error message names the module and operation it came from, so a
//! failure deep inside a study can be traced without a backtrace.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: unknown keys, missing models, invalid parameter values.
    #[error("configuration error: {0}")]
    Config(String),

    /// A mathematical precondition was violated at runtime (e.g. survival
    /// probability hit zero before the horizon, or a time outside [0, T]).
    #[error("domain error: {0}")]
    Domain(String),

    /// The grid violates the contraction condition of the implicit step.
    #[error("grid too coarse for implicit step: {0}")]
    Admissibility(String),

    /// Numerical failure: NaN coefficients, fixed-point non-convergence.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Least-squares estimator failure (singular design even with ridge).
    #[error("estimator error: {0}")]
    Estimator(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(origin: &str, msg: impl std::fmt::Display) -> Self {
        Error::Config(format!("{origin}: {msg}"))
    }
    pub fn domain(origin: &str, msg: impl std::fmt::Display) -> Self {
        Error::Domain(format!("{origin}: {msg}"))
    }
    pub fn admissibility(origin: &str, msg: impl std::fmt::Display) -> Self {
        Error::Admissibility(format!("{origin}: {msg}"))
    }
    pub fn numerical(origin: &str, msg: impl std::fmt::Display) -> Self {
        Error::Numerical(format!("{origin}: {msg}"))
    }
    pub fn estimator(origin: &str, msg: impl std::fmt::Display) -> Self {
        Error::Estimator(format!("{origin}: {msg}"))
    }

    /// Process exit status for the CLI: 2 for configuration problems,
    /// 3 for numerical/admissibility problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
