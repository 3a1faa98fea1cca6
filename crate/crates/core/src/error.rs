use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("numeric domain error: {0}")]
    Domain(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by NaN/Inf or out-of-domain arithmetic.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Domain(_) | Error::NonFinite(_) | Error::Diverged { .. })
    }
}
