use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped into two categories (see [`Error::category`]):
/// validation problems with the inputs, and numerical failures that occur
/// while fitting or sampling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("covariance matrix is not positive definite (leading minor {minor} failed)")]
    SingularCovariance { minor: usize },

    #[error("latent value outside GEV support at site {site}")]
    Support { site: usize },

    #[error("negative Hessian is not positive definite after {attempts} damping attempts")]
    IndefiniteHessian { attempts: usize },

    #[error("inner optimization did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    InnerNonConvergence {
        iterations: usize,
        grad_norm: f64,
        /// Stacked latent vector at the last iterate.
        best: Vec<f64>,
    },

    #[error("outer optimization did not converge after {evaluations} evaluations (gradient norm {grad_norm:.3e})")]
    OuterNonConvergence { evaluations: usize, grad_norm: f64 },

    #[error("sampler diagnostics failed: {0}")]
    Diagnostics(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse error classification used by the command-line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Numerical,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Domain(_)
            | Error::Dimension { .. }
            | Error::Validation(_)
            | Error::Parse { .. }
            | Error::Io(_) => ErrorCategory::Validation,
            _ => ErrorCategory::Numerical,
        }
    }

    /// Short machine-readable tag.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Dimension { .. } => "dimension",
            Error::SingularCovariance { .. } => "singular-covariance",
            Error::Support { .. } => "support",
            Error::IndefiniteHessian { .. } => "indefinite-hessian",
            Error::InnerNonConvergence { .. } => "inner-nonconvergence",
            Error::OuterNonConvergence { .. } => "outer-nonconvergence",
            Error::Diagnostics(_) => "diagnostics",
            Error::Validation(_) => "validation",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_finite(name: &str, x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Domain(format!("{name} must be finite, got {x}")))
    }
}
