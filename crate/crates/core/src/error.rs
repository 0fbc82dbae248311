//! Error type shared across the crate.

/// Convenience alias used by every fallible operation in this crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An argument violates the operation's contract.
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    /// A binary payload could not be decoded.
    #[error("parse error in {path} at byte {offset}: {reason}")]
    Parse {
        path: String,
        offset: u64,
        reason: String,
    },

    /// A stored artifact declares a format version this build does not read.
    #[error("unsupported version {found:?} in {path} (expected {expected:?})")]
    UnsupportedVersion {
        path: String,
        expected: String,
        found: String,
    },

    /// An artifact is missing or structurally incomplete on disk.
    #[error("artifact error at {path}: {reason}")]
    Artifact { path: String, reason: String },

    /// Metadata on an input does not match what the operation was asked to do.
    #[error("metadata mismatch in {op}: {reason}")]
    MetadataMismatch { op: &'static str, reason: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
