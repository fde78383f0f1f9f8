//! Metrics, R-D tooling, image I/O and the synthetic dataset.

pub mod image;
pub mod metrics;
pub mod rd;
pub mod synth;
