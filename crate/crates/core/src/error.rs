use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {lhs:?} vs {rhs:?} ({context})")]
    Shape {
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        context: &'static str,
    },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    Length { len: usize, max: usize },

    /// A record that cannot be rendered within the sequence budget.
    #[error("record {id} skipped: {reason}")]
    Skip { id: String, reason: String },

    #[error("tensor manifest mismatch at `{0}`")]
    Manifest(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("{} line(s) rejected in {}: {}", .errors.len(), .path.display(), .errors.first().map(|e| e.to_string()).unwrap_or_default())]
    Records {
        path: PathBuf,
        errors: Vec<crate::data::jsonl::LineError>,
    },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
