//! Pruning adapter modules at initialization, at desk scale.
//!
//! A small transformer encoder is built from a seed and frozen; adapters are
//! inserted, scored, pruned once with a global percentile threshold, and the
//! surviving weights are fine-tuned with a mask-preserving optimizer.

pub mod adapters;
pub mod autodiff;
pub mod data;
pub mod error;
mod io;
pub mod model;
pub mod pruning;
pub mod training;

pub use error::{Error, Result};
