//! Discrete-event simulation core.
//!
//! A run is fully determined by its [`ScenarioConfig`] (seed included):
//! events are processed in (time, sequence) order and every random draw
//! comes from a named sub-stream of the run's seed.

mod config;
mod event;
mod rng;
mod sim;

pub use config::{CacheConfig, CacheScheme, GeneratorParams, JobConfig, PilotConfig, ScenarioConfig, SubmissionMode, WorkflowConfig, WorkflowPreset};
pub use event::{Event, EventKind, EventQueue, Runner};
pub use rng::{stream, Stream, Streams};
pub use sim::{run, run_with, RunOptions, RunOutput};
