//! Machine-unlearning toolkit core.
//!
//! Datasets and splits, a small model zoo (classifier family plus a toy
//! conditional DDPM), gradient-based unlearning objectives, loss-based
//! data reweighting, the unlearning engine, and the evaluation suite.

pub mod curvefit;
pub mod dataset;
pub mod diffusion_eval;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod mathops;
pub mod models;
pub mod objectives;
pub mod splits;
pub mod weighting;

pub use error::{CoreError, Result};
