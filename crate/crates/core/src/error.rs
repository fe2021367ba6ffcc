use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate basis: {0}")]
    DegenerateBasis(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingDiverged {
        epoch: usize,
        loss: f64,
        trace: Vec<f64>,
    },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
