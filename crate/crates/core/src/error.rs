use std::path::Path;

use thiserror::Error;

/// Error type shared by every stage of the pipeline.
///
/// Variants map onto the CLI exit-code classes: anything I/O-shaped
/// ([`Error::Io`], [`Error::Format`]) exits 3, [`Error::MetricUndefined`]
/// exits 4, everything else is a validation failure and exits 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Backward pass called with state that does not match its forward call.
    #[error("state error: {0}")]
    State(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training failure: loss became non-finite at step {step}")]
    TrainingDiverged { step: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("duplicate product id: {0}")]
    DuplicateProduct(String),

    #[error("no candidates: {0}")]
    NoCandidates(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Corrupt or truncated binary payload. `offset` is the byte position
    /// at which reading failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("version mismatch: {0}")]
    Version(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
