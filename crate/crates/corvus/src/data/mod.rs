//! Synthetic datasets: the labeled QA benchmark, the unlabeled instruction
//! set, their file formats, and the regeneration manifest.

pub mod benchmark;
pub mod io;
pub mod manifest;
pub mod ood;
pub mod vocab;

pub use benchmark::{generate_benchmark, BenchmarkConfig, BenchmarkSplits, LabeledExample};
pub use manifest::{load_benchmark, load_instructions, write_dataset, DatasetManifest};
pub use ood::{generate_ood_instructions, OodConfig, UnlabeledExample};
