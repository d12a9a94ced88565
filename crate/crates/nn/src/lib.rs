//! Minimal neural-network building blocks with hand-written backward passes.
//!
//! Everything here is single-threaded and bit-deterministic given a seed:
//! the same parameters and inputs always produce the same outputs, and
//! checkpoints round-trip exactly. That property is load-bearing for the
//! training and evaluation code built on top, so no layer is allowed to
//! depend on thread scheduling or platform RNGs.

pub mod checkpoint;
pub mod init;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rng;

pub use params::{GradSet, ParamId, ParamMask, ParamSet};

/// Error type for parameter/checkpoint handling.
#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}
