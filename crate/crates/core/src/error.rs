use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: need 2 or 3 axes, each with extent >= 2")]
    InvalidShape(Vec<usize>),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("malformed payload: {0}")]
    MalformedPayload(String),

    #[error("truncated payload: expected {expected}, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DType { expected: String, found: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state diverged at step {step} ({phase})")]
    Divergence { step: usize, phase: &'static str },

    #[error("optimization diverged at iteration {iteration}")]
    OptimizationDiverged {
        iteration: usize,
        /// Parameters of the last iterate whose loss and gradient were finite.
        last_finite: Vec<f64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn mismatch(expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            found: format!("{found:?}"),
        }
    }
}
