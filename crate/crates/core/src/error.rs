use thiserror::Error;

/// Everything that can go wrong while loading, solving or auditing a market.
#[derive(Debug, Error)]
pub enum Error {
    /// The input document does not match the expected schema.
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    /// The input parsed but violates a model invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A root bracket could not be established or a solver ran out of budget.
    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    /// Best-response iteration exceeded its round budget.
    #[error("iteration limit of {limit} rounds reached (last sup-norm change {last_change:e})")]
    IterationLimit {
        limit: usize,
        last_change: f64,
        trace: Vec<Vec<f64>>,
    },

    /// A designed solution failed its approximation or feasibility audit.
    #[error("certificate violation: {0}")]
    CertificateViolation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
