use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("malformed input: {0}")]
    Structure(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },
    #[error("metric undefined for feature {feature}: {message}")]
    Metric { feature: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics (divergence, non-finite state) rather
    /// than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. } | Error::Fit(_) | Error::Training { .. }
        )
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            Error::Numerical { message, .. } => Error::Numerical { step, message },
            other => other,
        }
    }
}
