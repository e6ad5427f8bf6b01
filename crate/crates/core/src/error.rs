use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration} (time step {time_step:?}, path {path:?}): {detail}")]
    Divergence {
        time_step: Option<usize>,
        iteration: usize,
        path: Option<usize>,
        detail: String,
        /// Validation losses recorded before the failure.
        partial_curve: Vec<crate::solvers::LossPoint>,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for numerical divergence as opposed to misconfiguration.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
