//! Error types shared across the crate.

use alloc::string::String;
use thiserror::Error;

/// Errors produced by geometry, network, and training operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoreError {
    /// A point cloud failed its basic invariants (empty, or non-finite coordinates).
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    /// A scalar argument was outside its documented domain.
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument {
        name: &'static str,
        reason: String,
    },

    /// Neighborhood size incompatible with the reference set.
    #[error("k = {k} out of range for reference of size {n}")]
    BadNeighborhood { k: usize, n: usize },

    /// Two tensors or parameter sets that must agree in shape do not.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// A loss component evaluated to NaN or infinity.
    #[error("non-finite value in component `{0}`")]
    NonFinite(&'static str),

    /// Checkpoint bytes could not be decoded.
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    /// Checkpoint was written by an incompatible format version.
    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
}

impl CoreError {
    pub(crate) fn arg(name: &'static str, reason: impl Into<String>) -> Self {
        CoreError::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        CoreError::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
