use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("environment stepped after terminal state")]
    StepAfterDone,

    #[error("{0}")]
    Guard(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn guard(msg: impl Into<String>) -> Self {
        Error::Guard(msg.into())
    }
}
