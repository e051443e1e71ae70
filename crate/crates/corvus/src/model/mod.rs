//! The instrumented decoder-only transformer: shape config, parameters,
//! low-rank adapters, the traced forward pass, checkpoints, decoding.

pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod generate;
pub mod params;

pub use adapter::{AdapterConfig, AdapterPair, AdapterState, TargetModule};
pub use config::ModelConfig;
pub use forward::{run_forward, ForwardTrace};
pub use params::Params;
