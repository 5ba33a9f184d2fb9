use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A value fell outside the domain an operation accepts.
    #[error("input domain error: {0}")]
    Domain(String),
    #[error("validation failed for video {video_id}: {reason}")]
    Validation { video_id: String, reason: String },
    #[error("empty split")]
    EmptySplit,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    /// A loss or gradient became NaN/inf. `samples` names the video ids of the offending batch.
    #[error("non-finite {component} in batch {samples:?}")]
    NonFinite {
        component: String,
        samples: Vec<String>,
    },
    #[error("word not found: {0}")]
    WordNotFound(String),
    /// Internal invariant violation, i.e. a bug rather than bad input.
    #[error("invariant violated: {0}")]
    Invariant(String),
}
