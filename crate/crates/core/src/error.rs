use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: vector norm {norm:e} is below {eps:e}")]
    Degenerate { norm: f64, eps: f64 },

    #[error("capacity exceeded: placed {placed} of {requested} places under the spacing constraint")]
    Capacity { requested: usize, placed: usize },

    #[error("coverage: {0}")]
    Coverage(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("empty database")]
    EmptyDatabase,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
