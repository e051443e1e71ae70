//! Dataset directory layout and the manifest that pins it down.
//!
//! `write_dataset` materializes four JSONL files plus `manifest.json`. The
//! manifest stores the generator configs and a sha-256 per file, so
//! `verify_dataset` can regenerate everything from the configs and prove
//! the files on disk are bit-for-bit what those configs produce.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::benchmark::{generate_benchmark, BenchmarkConfig, BenchmarkSplits};
use super::io::{file_hash, read_jsonl, write_jsonl};
use super::ood::{four_gram_overlap, generate_ood_instructions, OodConfig, UnlabeledExample};
use crate::error::{CorvusError, Result};

pub const BENCH_TRAIN: &str = "benchmark_train.jsonl";
pub const BENCH_VAL: &str = "benchmark_validation.jsonl";
pub const BENCH_TEST: &str = "benchmark_test.jsonl";
pub const OOD_FILE: &str = "instructions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub benchmark: BenchmarkConfig,
    pub ood: OodConfig,
    /// (file name, sha-256 hex) for every data file.
    pub files: Vec<(String, String)>,
    pub counts: ManifestCounts,
    /// Fraction of instruction 4-grams also present in the benchmark;
    /// the disjoint alphabets force 0.
    pub four_gram_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub instructions: usize,
}

/// Generates both datasets and writes the full directory.
pub fn write_dataset(dir: &Path, bench: &BenchmarkConfig, ood: &OodConfig) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let splits = generate_benchmark(bench)?;
    let instructions = generate_ood_instructions(ood)?;

    write_jsonl(&dir.join(BENCH_TRAIN), &splits.train)?;
    write_jsonl(&dir.join(BENCH_VAL), &splits.validation)?;
    write_jsonl(&dir.join(BENCH_TEST), &splits.test)?;
    write_jsonl(&dir.join(OOD_FILE), &instructions)?;

    let overlap = four_gram_overlap(
        &instructions.iter().map(|e| e.tokens()).collect::<Vec<_>>(),
        &splits.all().map(|e| e.tokens()).collect::<Vec<_>>(),
    );

    let mut files = Vec::new();
    for name in [BENCH_TRAIN, BENCH_VAL, BENCH_TEST, OOD_FILE] {
        files.push((name.to_string(), file_hash(&dir.join(name))?));
    }
    let manifest = DatasetManifest {
        benchmark: *bench,
        ood: *ood,
        files,
        counts: ManifestCounts {
            train: splits.train.len(),
            validation: splits.validation.len(),
            test: splits.test.len(),
            instructions: instructions.len(),
        },
        four_gram_overlap: overlap,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CorvusError::input(format!("manifest serialize failed: {e}")))?;
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let raw = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    serde_json::from_str(&raw).map_err(|e| CorvusError::Parse { line: 0, detail: e.to_string() })
}

/// Loads the three benchmark splits from disk.
pub fn load_benchmark(dir: &Path) -> Result<BenchmarkSplits> {
    Ok(BenchmarkSplits {
        train: read_jsonl(&dir.join(BENCH_TRAIN))?,
        validation: read_jsonl(&dir.join(BENCH_VAL))?,
        test: read_jsonl(&dir.join(BENCH_TEST))?,
    })
}

pub fn load_instructions(dir: &Path) -> Result<Vec<UnlabeledExample>> {
    read_jsonl(&dir.join(OOD_FILE))
}

/// Regenerates from the manifest's configs and checks every file hash.
/// Returns the mismatched file names (empty means verified).
pub fn verify_dataset(dir: &Path) -> Result<Vec<String>> {
    let manifest = read_manifest(dir)?;
    let tmp = tempfile_dir(dir)?;
    let fresh = write_dataset(&tmp.path, &manifest.benchmark, &manifest.ood)?;
    let mut bad = Vec::new();
    for ((name, want), (_, got)) in manifest.files.iter().zip(&fresh.files) {
        let on_disk = file_hash(&dir.join(name))?;
        if on_disk != *want || on_disk != *got {
            bad.push(name.clone());
        }
    }
    Ok(bad)
}

/// Minimal scratch dir that cleans up on drop; avoids adding a dependency
/// to the non-test build.
struct TempDir {
    path: PathBuf,
}

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.path);
    }
}

fn tempfile_dir(near: &Path) -> Result<TempDir> {
    let path = near.join(format!(".verify-{}", std::process::id()));
    std::fs::create_dir_all(&path)?;
    Ok(TempDir { path })
}
