use thiserror::Error;

/// Errors raised by the simulator, cutter, model and training code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("size error: {0}")]
    Size(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("structure error: {0}")]
    Structure(String),
    #[error("budget error: {terms} terms exceeds the limit of {limit}")]
    Budget { terms: u128, limit: u128 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("certification error: {0}")]
    Certification(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
