//! Cross-resolution person re-identification: two-stream encoding,
//! feature-level low-to-high resolution transformation, self-weighted
//! attention losses and single-shot CMC evaluation.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod raft;
pub mod swa;
pub mod trainer;

pub use error::{FtwaError, Result};
