//! Desk-scale workbench for telemetry-camouflage red-teaming.
//!
//! The crate trains a small instrumented decoder-only transformer, extracts
//! single-pass telemetry (token entropy, hidden-state log-volume, attention
//! diagonality), fits a battery of hallucination detectors on that telemetry,
//! and then trains low-rank adapters that camouflage the telemetry while the
//! base model stays frozen. An evaluation harness replays fixed answers
//! through both model variants and reports how far each detector degrades.

pub mod cli;
pub mod data;
pub mod detectors;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod runconfig;
pub mod tape;
pub mod telemetry;
pub mod trainer;

pub use cli::run_cli;
pub use error::{CorvusError, Result};
pub use runconfig::RunConfig;
