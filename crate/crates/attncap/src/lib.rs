//! Image captioning from scratch: a soft-attention encoder-decoder and a
//! fixed-vector baseline, trained on a deterministic synthetic shape corpus,
//! scored with n-gram and edit-distance caption metrics.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
