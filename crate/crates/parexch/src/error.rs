//! Crate-wide error type shared by buffers, transport, collectives and trainers.

use std::time::Duration;

/// Everything that can go wrong in a world of ranks.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("value {value} at index {index} overflows binary16 to infinity")]
    OverflowToInfinity { index: usize, value: f64 },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid rank {rank} for world size {world}")]
    InvalidRank { rank: usize, world: usize },

    #[error("peer {peer} unreachable: {reason}")]
    PeerUnreachable { peer: usize, reason: String },

    #[error("peer {peer} closed the connection")]
    PeerClosed { peer: usize },

    #[error("timed out after {after:?} waiting on peer {peer}")]
    Timeout { peer: usize, after: Duration },

    #[error("timed out after {after:?} waiting for any message")]
    TimeoutAny { after: Duration },

    #[error("rank {rank} panicked: {message}")]
    WorkerPanic { rank: usize, message: String },

    /// Collective header disagreed with what this rank expected: the world
    /// interleaved different collectives or buffer shapes.
    #[error("collective mismatch from rank {peer}: expected {expected}, got {got}")]
    CollectiveMismatch {
        peer: usize,
        expected: String,
        got: String,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss at iteration {iteration}: training diverged")]
    NonFiniteLoss { iteration: u64 },

    #[error("non-finite gradient at index {index}")]
    NonFiniteGradient { index: usize },

    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: String, reason: String },

    #[error("truncated payload in {path}: expected {expected} bytes, got {got}")]
    TruncatedPayload {
        path: String,
        expected: usize,
        got: usize,
    },

    #[error("crop {crop_h}x{crop_w} larger than image {h}x{w}")]
    CropLargerThanImage {
        crop_h: usize,
        crop_w: usize,
        h: usize,
        w: usize,
    },

    #[error("loader protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
