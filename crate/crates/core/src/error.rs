use thiserror::Error;

pub type Result<T, E = CatdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CatdError {
    /// A configuration value violates a documented constraint.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data has the wrong shape, length or range.
    #[error("input error: {0}")]
    Input(String),

    /// A scalar argument lies outside the function's domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("corrupt container: array `{array}`: {reason}")]
    CorruptContainer { array: String, reason: String },

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("training diverged at step {step}: {diagnostic}")]
    TrainingDivergence { step: usize, diagnostic: String },

    #[error("sampling diverged at diffusion step {t}")]
    SamplingDivergence { t: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CatdError {
    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            CatdError::Config(_) | CatdError::Input(_) | CatdError::Domain(_) => 2,
            CatdError::MissingPrerequisite(_) => 3,
            CatdError::TrainingDivergence { .. } | CatdError::SamplingDivergence { .. } => 4,
            _ => 1,
        }
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> CatdError {
    CatdError::Config(msg.into())
}

pub(crate) fn input_err(msg: impl Into<String>) -> CatdError {
    CatdError::Input(msg.into())
}
