//! Training loops: base-model pretraining and adapter camouflage training.

pub mod config;
pub mod corvus;
pub mod fgsm;
pub mod loss;
pub mod optim;
pub mod pretrain;

pub use config::CorvusConfig;
pub use corvus::{train_corvus, train_step, StepOutcome, TrainLogEntry};
pub use loss::LossBreakdown;
pub use pretrain::{pretrain, PretrainConfig, PretrainOutcome};
