//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by the training laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity appeared where finite arithmetic was required.
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    /// IDX file carries the wrong magic number.
    #[error("{}: bad IDX magic: expected {expected:#010x}, found {found:#010x}", path.display())]
    IdxBadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    /// IDX file ended before the declared payload.
    #[error("{}: truncated IDX file: needed {needed} bytes, found {found}", path.display())]
    IdxTruncated {
        path: PathBuf,
        needed: usize,
        found: usize,
    },

    /// Image and label files disagree on the sample count.
    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    /// Malformed CSV content.
    #[error("{}:{line}: {msg}", path.display())]
    Csv {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Malformed checkpoint file.
    #[error("{}: invalid checkpoint: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },

    /// An I/O failure, annotated with the path involved.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
