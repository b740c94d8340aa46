use std::path::PathBuf;

/// Errors surfaced by this crate.
///
/// Invariant violations inside a correctly-built graph are bugs and
/// panic instead; `Error` covers conditions a caller can hit with bad
/// inputs: malformed files, incompatible configs, degenerate metric
/// inputs, and diverging training runs.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("shape: {0}")]
    Shape(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("clip {clip_id}: missing {modality} stream")]
    MissingModality { clip_id: String, modality: String },

    #[error("metric undefined: {0}")]
    DegenerateMetric(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// An I/O error tagged with the path it happened on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}
