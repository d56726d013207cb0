//! End-to-end speaker-attributed speech recognition at desk scale.
//!
//! A single encoder-decoder model consumes a multi-talker feature mixture
//! plus a set of candidate speaker profiles and emits a serialized
//! transcript together with a speaker label per token, so speaker counting,
//! transcription, and speaker identification come out of one beam search.
//! The crate also ships the synthetic mixture generator, the training loop,
//! and the speaker-attributed metric suite used to evaluate it.

pub mod dataset;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sot;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
