use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("selection mismatch: {0}")]
    SelectionMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
