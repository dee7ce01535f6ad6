use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One failed check in a scenario or parameter record, keyed by the
/// dotted path of the offending field (e.g. `params.eps0`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub reason: String,
}

impl FieldError {
    pub fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.reason)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationErrors(pub Vec<FieldError>);

impl ValidationErrors {
    pub fn push(&mut self, path: impl Into<String>, reason: impl Into<String>) {
        self.0.push(FieldError::new(path, reason));
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn extend(&mut self, other: ValidationErrors) {
        self.0.extend(other.0);
    }

    pub fn into_result(self) -> Result<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(self))
        }
    }
}

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("{0}")]
    Validation(ValidationErrors),

    #[error("mass mismatch ({mass_a} vs {mass_b}); use gw11 for measures of different mass")]
    MassMismatch { mass_a: f64, mass_b: f64 },

    #[error("brute-force oracle limited to {max} atoms per side, got {got}")]
    TooManyAtoms { max: usize, got: usize },

    #[error("step size too large: {0}")]
    StepSize(String),

    #[error("non-finite state at t = {t}: {what}")]
    NonFinite { t: f64, what: String },

    #[error("invariant violated at t = {t}: {what}")]
    Invariant { t: f64, what: String },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("{path}: {reason}")]
    Parse { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures that stem from the numerics rather than the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Invariant { .. } | Error::Solver(_) | Error::StepSize(_)
        )
    }
}
