use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no data: {0}")]
    NoData(String),

    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    #[error("utility evaluation failed for coalition {coalition:?}: {reason}")]
    Utility { coalition: Vec<usize>, reason: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid transaction #{index} in block {height}: {reason}")]
    InvalidTransaction { height: u64, index: usize, reason: String },

    #[error("orphan block at height {height}: parent {parent} is unknown")]
    Orphan { height: u64, parent: String },

    #[error("malformed block: {0}")]
    Malformed(String),

    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
