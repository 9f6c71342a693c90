//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an index set) disagree on shape.
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A dimension constraint was violated (empty reduction, bad rank, ...).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A lookup id fell outside its table.
    #[error("{what} id {id} out of range (limit {limit})")]
    Lookup {
        what: &'static str,
        id: usize,
        limit: usize,
    },

    /// A forward pass produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A dataset or config text stream could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// An invalid or inconsistent configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("checkpoint magic mismatch (not a seqmark checkpoint)")]
    CheckpointMagic,

    /// Checkpoint format version is not supported by this build.
    #[error("unsupported checkpoint format version {0}")]
    CheckpointVersion(u32),

    /// Checkpoint file ended before the declared payload was complete.
    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    /// Checkpoint manifest is present but does not describe a loadable model.
    #[error("checkpoint manifest invalid: {0}")]
    CheckpointManifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
