//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its mathematical domain (non-positive
    /// lengthscale, negative window, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An index does not address an existing unit / latent function.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// Input data violates a precondition (empty series, missing events, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A Cholesky factorization failed even after jitter escalation.
    #[error("factorization of {matrix} failed (jitter escalated to {jitter:.1e})")]
    Factorization { matrix: &'static str, jitter: f64 },

    /// A numerical failure inside a named component.
    #[error("numerical failure in {component}: {message}")]
    Numerical {
        component: &'static str,
        message: String,
    },

    /// A file does not conform to its schema.
    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: u64,
        message: String,
    },

    /// Persisted model carries an unsupported schema version.
    #[error("unsupported model schema version {found} (expected {expected})")]
    SchemaVersion { expected: u32, found: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Factorization { .. } | Error::Numerical { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
