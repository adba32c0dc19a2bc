use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("ordering error: timestep {t} must be greater than {t_prev}")]
    Ordering { t: usize, t_prev: usize },

    #[error("trajectory error: {0}")]
    Trajectory(String),

    #[error("topology mismatch: expected digest {expected}, found {found}")]
    Topology { expected: String, found: String },

    #[error("training diverged at step {step}: loss={loss}, {detail}")]
    Divergence { step: usize, loss: f64, detail: String },

    #[error("argument error: {0}")]
    Argument(String),

    #[error("corrupt container {what}: {detail}")]
    Corruption { what: String, detail: String },

    #[error("phase {phase} failed: {detail}")]
    Phase { phase: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn corrupt(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Corruption {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
