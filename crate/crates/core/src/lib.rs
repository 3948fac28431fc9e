//! Black-box detection of LLM watermarks.
//!
//! The crate contains a deterministic toy language model, the Red-Green,
//! Fixed-Sampling and Cache-Augmented watermark families as samplers over
//! it, a transport-independent black-box interface (simulator, HTTP,
//! transcript replay), the statistical primitives, the three presence tests
//! and the post-detection parameter estimators.

pub mod blackbox;
pub mod corelm;
pub mod detectors;
pub mod estimators;
pub mod rng;
pub mod schemes;
pub mod stats;
