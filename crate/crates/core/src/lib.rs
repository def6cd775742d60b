//! Discrete-event simulator and scheduling library for pilot-job based
//! workflow execution.
//!
//! Real jobs wait in a central [`taskqueue::TaskQueue`]; pilot jobs started
//! on worker nodes pull them, resolve inputs through their local data cache
//! (optionally shared between pilots on the same node), and report
//! completion without notification latency. A [`monitor::PilotMonitor`]
//! decides how many pilots a site needs. The [`engine`] drives everything on
//! a virtual clock with seeded randomness so that every run is reproducible.

pub mod cache;
pub mod engine;
pub mod error;
pub mod infra;
pub mod matrix;
pub mod metrics;
pub mod monitor;
pub mod pilot;
pub mod taskqueue;
pub mod workload;

pub use error::{Error, Result};

/// One megabyte (decimal).
pub const MB: u64 = 1_000_000;
/// One gigabyte (decimal).
pub const GB: u64 = 1_000_000_000;
