use thiserror::Error;

#[derive(Debug, Error)]
pub enum MomeError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MomeError>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::MomeError::Dimension(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::MomeError::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use dim_err;
