//! Radiograph abnormality triage pipeline.
//!
//! A vision-transformer encoder pools radiograph patches into a fixed-length
//! embedding, a small MLP head turns that into an abnormality probability,
//! and the surrounding machinery covers preprocessing, dataset handling with
//! patient-disjoint splits, selective-unfreezing fine-tuning, and study-level
//! evaluation with per-anatomy reporting. Everything is deterministic given a
//! seed.

pub mod cli;
pub mod dataset;
pub mod encoder;
pub mod head;
pub mod model;
pub mod preprocess;
pub mod train;
pub mod error;
pub mod eval;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{Scalar, Tensor};
