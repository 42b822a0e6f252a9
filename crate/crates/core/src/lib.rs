//! Missingness-aware multimodal fusion with cross-modal reconstruction,
//! multitask outcome heads and a cross-fitted pattern rectifier, plus a
//! synthetic generator with known ground truth.

pub mod datagen;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod outcome;
pub mod reconstruction;

pub use error::{Error, Result};
