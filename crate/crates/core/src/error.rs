use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands (or an operand and a parameter block) disagree on shape.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A scalar argument is outside its allowed range.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A configuration file failed to parse or validate.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset file is malformed (bad magic, truncation, inconsistent dims).
    #[error("dataset format error: {0}")]
    Format(String),

    /// A checkpoint file is malformed or does not match the model being loaded.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// The training loss stopped being finite.
    #[error("training aborted: non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
