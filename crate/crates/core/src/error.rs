use std::path::PathBuf;

/// Errors raised anywhere in the harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A documented precondition was not met by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward computation produced NaN or infinity.
    #[error("non-finite value produced by `{op}`")]
    Numeric { op: &'static str },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("method `{method}` failed: {reason}")]
    Method { method: String, reason: String },

    #[error("configuration error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("reporting error at x = {x}: {reason}")]
    Report { x: f64, reason: String },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn method(method: impl Into<String>, reason: impl ToString) -> Self {
        Error::Method {
            method: method.into(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
