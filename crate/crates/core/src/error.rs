use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A point or parameter lies outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),
    /// Malformed or inconsistent configuration (duplicate tags, bad rates, missing rows).
    #[error("configuration error: {0}")]
    Config(String),
    /// The dying path has no exit point, so a kernel cannot select a revival point.
    #[error("revival undefined: {0}")]
    RevivalUndefined(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("time {t} lies in the censored region (censored at {censor})")]
    UndefinedRegion { t: f64, censor: f64 },
    #[error("empty domain: {0}")]
    EmptyDomain(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Whether this error stems from user input rather than the computation.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Domain(_) | Error::Json(_) | Error::Unsupported(_)
        )
    }
}
