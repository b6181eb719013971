//! Library side of the CLI harness: experiment configuration, stats
//! emission, exchange benchmarking and the cross-backend collective probe.
//! The binary in `main.rs` is a thin argument layer over these.

pub mod bench;
pub mod config;
pub mod probe;
pub mod stats;

pub use config::{Backend, ExperimentConfig, Precision};
