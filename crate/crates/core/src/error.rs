use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the library. The CLI maps these onto exit codes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("invalid input: {0}")]
    Validation(String),

    /// An estimator was evaluated at a point where it is undefined.
    #[error("degenerate estimator: {0}")]
    Degenerate(String),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

/// Fails unless `alpha` lies strictly inside (0, 1).
pub(crate) fn check_level(name: &str, alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::validation(format!(
            "{name} must lie strictly inside (0, 1), got {alpha}"
        )))
    }
}
