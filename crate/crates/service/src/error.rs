use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] exo_core::Error),

    #[error("malformed message: {0}")]
    Malformed(String),

    /// A client request that was understood and refused.
    #[error("{0}")]
    Rejected(String),

    #[error("port {port} unavailable: {source}")]
    PortBusy { port: u16, source: std::io::Error },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

pub(crate) fn rejected(msg: impl Into<String>) -> ServiceError {
    ServiceError::Rejected(msg.into())
}
