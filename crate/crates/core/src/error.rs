use thiserror::Error;

/// Errors surfaced by the planning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid robot model: {0}")]
    InvalidModel(String),

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("invalid constraint profile: {0}")]
    InvalidProfile(String),

    #[error("invalid QP problem: {0}")]
    InvalidProblem(String),

    #[error("factorization failed: zero pivot at column {0}")]
    ZeroPivot(usize),

    #[error("gravito-inertial acceleration magnitude {0:.3e} m/s^2 too small for an alignment direction")]
    DegenerateAcceleration(f64),

    #[error("linearization produced a non-finite value for `{0}`")]
    NonFinite(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("planning failed: {0}")]
    Planning(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
