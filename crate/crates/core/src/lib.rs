//! Multi-attribute recognition built around a query-per-attribute
//! transformer head and a masked sentence refinement stage, with its own
//! reverse-mode autodiff tape, a synthetic benchmark generator with an
//! exact Bayes reference, and deterministic training utilities.

pub mod aqn;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod icmlm;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
