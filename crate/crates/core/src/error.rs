use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("numerical error at step {step}: {message}")]
    Numerical { step: usize, message: String },

    #[error("sinkhorn did not converge in {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error(transparent)]
    Core(#[from] numcore::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by numerics rather than by inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. }
                | Error::NoConvergence { .. }
                | Error::Core(numcore::Error::Evaluation(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
