use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum KbrError {
    /// Malformed or inconsistent arguments.
    #[error("invalid input: {0}")]
    Input(String),

    /// A factorization or solve failed.
    #[error("numeric failure: {message} (regularization {regularization:e}, condition estimate {condition:e})")]
    Numeric {
        message: String,
        regularization: f64,
        condition: f64,
    },

    /// Input data carries no usable information (identical points, cancelling weights, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Experiment configuration could not be parsed or validated.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl KbrError {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        KbrError::Input(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>, regularization: f64, condition: f64) -> Self {
        KbrError::Numeric {
            message: msg.into(),
            regularization,
            condition,
        }
    }

    /// True for errors caused by the caller's configuration or data shape
    /// rather than by floating-point breakdown.
    pub fn is_config_error(&self) -> bool {
        matches!(self, KbrError::Input(_) | KbrError::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, KbrError>;
