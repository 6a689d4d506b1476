use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid prompt: {0}")]
    Prompt(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("no prediction/ground-truth pairs to evaluate")]
    EmptyEvaluation,
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
