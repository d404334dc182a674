//! Error type shared by every public operation in this crate.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the public API.
///
/// Programmer errors (index bugs, internal shape slips) panic via debug
/// assertions instead; everything a caller can trigger with bad input or a
/// bad environment comes through here.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is outside its documented range or two values
    /// contradict each other.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Two tensors (or a tensor and a config) disagree about shape.
    #[error("shape mismatch: {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// An argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A dataset directory does not follow the `<domain>/<live|spoof>/*.png`
    /// layout or contains an undecodable file.
    #[error("dataset error at {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    /// A checkpoint archive is missing pieces or its manifest disagrees with
    /// the tensors on disk.
    #[error("checkpoint error at {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    /// A loss became NaN or infinite during training; carries the step at
    /// which it happened for the diagnostic.
    #[error("non-finite loss at step {step}: rec={rec}, con={con:?}")]
    NonFiniteLoss {
        step: usize,
        rec: f64,
        con: Option<f64>,
    },

    /// A metric that needs both classes was handed a single-class score set.
    #[error("score set contains only one class: {0}")]
    SingleClass(String),

    /// A named random variable is not part of the joint distribution.
    #[error("unknown variable name: {0}")]
    UnknownVariable(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    /// Shorthand for a [`Error::ShapeMismatch`] with formatted dimensions.
    pub fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// Wrap an io error with the path it happened on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
