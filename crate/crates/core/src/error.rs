use thiserror::Error;

/// Errors raised by the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate curve: {0}")]
    DegenerateCurve(String),

    #[error("ill-conditioned least-squares system: {0}")]
    IllConditioned(String),

    #[error("distance to the printed structure is undefined: nothing has been printed")]
    UndefinedDistance,

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
