use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("singular system (normal-equation condition {condition:.3e})")]
    Singular { condition: f64 },

    #[error("angular correlation undefined: no coefficients of degree >= 2")]
    UndefinedCorrelation,

    #[error("zeta optimization failed ({reason}); last valid zeta = {last_zeta}")]
    OptimizationFailed { last_zeta: f64, reason: String },

    #[error("exponential overflow restoring value {0}")]
    Overflow(f64),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, found })
    }
}
