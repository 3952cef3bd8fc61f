use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("coordinate {0:?} lies outside the grid bounds")]
    OutOfBounds(Vec<f64>),

    #[error("partition index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("partition {0} is not present in the model (cropped)")]
    CroppedPartition(usize),

    #[error("partition {0} is already cropped")]
    AlreadyCropped(usize),

    #[error("cannot drop every partition; at least one must remain")]
    EmptyModel,

    #[error("infeasible partition plan: {0}")]
    InfeasiblePlan(String),

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Divergence { iteration: usize, loss: f64 },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
