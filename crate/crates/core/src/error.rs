use std::fmt;

use thiserror::Error;

/// Errors raised by model construction, evaluation and fitting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A mapping produced a non-finite value.
    #[error("non-finite mapping output at index {output}{}", coordinate_suffix(*.coordinate))]
    Evaluation {
        output: usize,
        /// Parameter coordinate being perturbed, when the failure happened
        /// inside a finite-difference sweep.
        coordinate: Option<usize>,
    },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("degenerate evidence: residual sum of squares {0:e} is numerically zero")]
    DegenerateEvidence(f64),

    #[error("invalid model:\n{0}")]
    Validation(ValidationReport),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn coordinate_suffix(coordinate: Option<usize>) -> String {
    match coordinate {
        Some(j) => format!(" (perturbing coordinate {j})"),
        None => String::new(),
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Outcome of [`crate::model::validate_model`]: every violated invariant,
/// in the order the checks ran.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub(crate) fn push(&mut self, message: impl Into<String>) {
        self.violations.push(message.into());
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::Validation(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  - {v}")?;
        }
        Ok(())
    }
}
