//! Late-binding query engine with cross-layer decision timing.
//!
//! A cost-based planner marks operators whose variant can be finalized at
//! runtime; the executor binds them at the boundary where input cardinality
//! is observed, consulting a risk vector assembled from planner, executor,
//! and accelerator signals.

pub mod accel;
pub mod bench;
pub mod cli;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod planner;
pub mod policy;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
