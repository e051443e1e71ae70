//! End-to-end run of the command-line pipeline at reduced scale.
//!
//! Drives the compiled binary through every subcommand in a temp directory
//! and checks the artifact contract: files exist, schemas parse, provenance
//! lines carry the producing config hash, and rerunning a stage from the
//! frozen auditor is byte-stable.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_corvus"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small enough to finish the whole chain in well under a minute, but
/// trained enough that probe fitting has varied targets to work with.
fn reduced_config(root: &Path) -> String {
    format!(
        "data_dir = {d}/data\n\
         out_dir = {d}/out\n\
         model.d_model = 32\n\
         model.n_layers = 2\n\
         model.n_heads = 2\n\
         model.max_seq_len = 32\n\
         bench.n_examples = 80\n\
         bench.n_pairs = 2\n\
         bench.value_len = 2\n\
         ood.n_examples = 60\n\
         ood.span_min = 3\n\
         ood.span_max = 5\n\
         pretrain.max_updates = 8000\n\
         pretrain.learning_rate = 0.003\n\
         pretrain.target_accuracy = 0.55\n\
         pretrain.instruction_mix = 0.25\n\
         pretrain.instruction_examples = 60\n\
         eval.utility_max_new = 6\n",
        d = root.display()
    )
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn jsonl_rows(path: &Path) -> Vec<serde_json::Value> {
    read(path)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("bad line in {}: {e}", path.display())))
        .collect()
}

#[test]
fn full_chain_at_reduced_scale() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = tmp.path().join("run.cfg");
    std::fs::write(&cfg_path, reduced_config(tmp.path())).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");

    let summary = run_ok(&["--config", cfg, "gen-data"]);
    assert!(summary.contains("32/8/40"), "unexpected gen-data summary: {summary}");
    for f in [
        "manifest.json",
        "benchmark_train.jsonl",
        "benchmark_validation.jsonl",
        "benchmark_test.jsonl",
        "instructions.jsonl",
        "provenance.txt",
    ] {
        assert!(data.join(f).exists(), "missing {f} after gen-data");
    }

    run_ok(&["--config", cfg, "pretrain"]);
    assert!(out.join("model.bin").exists());
    let curve = jsonl_rows(&out.join("pretrain_curve.jsonl"));
    assert!(!curve.is_empty());
    assert!(curve[0].get("ce").is_some() && curve[0].get("lr").is_some());

    run_ok(&["--config", cfg, "train-corvus"]);
    assert!(out.join("adapter.bin").exists());
    let log = jsonl_rows(&out.join("corvus_log.jsonl"));
    assert!(!log.is_empty());
    for key in ["step", "lr", "ce", "te", "hv_mean", "ad_clean", "ad_adv", "total"] {
        assert!(log[0].get(key).is_some(), "train log missing {key}");
    }

    run_ok(&["--config", cfg, "replay", "--variant", "clean"]);
    assert!(out.join("auditor.bin").exists(), "replay must fit and persist the auditor");
    let clean = jsonl_rows(&out.join("scores_clean.jsonl"));
    assert_eq!(clean.len(), 40);
    assert_eq!(clean[0]["scores"].as_object().unwrap().len(), 6);

    run_ok(&["--config", cfg, "replay", "--variant", "adapted"]);
    let adapted = jsonl_rows(&out.join("scores_adapted.jsonl"));
    assert_eq!(adapted.len(), clean.len());
    for (c, a) in clean.iter().zip(&adapted) {
        assert_eq!(c["id"], a["id"], "replay variants must cover the same examples in order");
    }

    // rerun against the frozen auditor: byte-identical scores
    let before = read(&out.join("scores_clean.jsonl"));
    run_ok(&["--config", cfg, "replay", "--variant", "clean"]);
    assert_eq!(before, read(&out.join("scores_clean.jsonl")));

    run_ok(&["--config", cfg, "evaluate"]);
    let report: serde_json::Value = serde_json::from_str(&read(&out.join("report.json"))).unwrap();
    assert_eq!(report["detectors"].as_array().unwrap().len(), 6);
    assert_eq!(report["metadata"]["n_test"], 40);
    let table = read(&out.join("report.txt"));
    assert!(table.contains("->") && table.contains("attention_diag"));

    run_ok(&["--config", cfg, "ablate", "--only", "no_fgsm"]);
    let rows: serde_json::Value = serde_json::from_str(&read(&out.join("ablation.json"))).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 1);
    assert_eq!(rows[0]["spec"]["name"], "no_fgsm");
    assert_eq!(rows[0]["spec"]["epsilon"], 0.0);

    let rendered = run_ok(&["--config", cfg, "report"]);
    assert!(rendered.contains("attention_diag") && rendered.contains("no_fgsm"));

    // every artifact line points at the same producing config
    let effective = read(&out.join("run_config.txt"));
    assert!(effective.contains("pretrain.target_accuracy = 0.55"));
    let prov = read(&out.join("provenance.txt"));
    let hashes: Vec<&str> =
        prov.lines().map(|l| l.split('\t').nth(1).expect("name\\thash line")).collect();
    assert!(hashes.len() >= 8);
    assert!(hashes.iter().all(|h| *h == hashes[0] && h.len() == 64));
    assert_eq!(report["metadata"]["run_config"].as_str().unwrap(), hashes[0]);
}

#[test]
fn malformed_config_reports_line_and_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = tmp.path().join("bad.cfg");
    std::fs::write(&cfg_path, "seed = 5\n# fine so far\nnot a key value line\n").unwrap();
    let out = run(&["--config", cfg_path.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "stderr should cite the offending line: {err}");
}

#[test]
fn unknown_flag_exits_2() {
    let out = run(&["--definitely-not-a-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_artifacts_fail_cleanly() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = tmp.path().join("run.cfg");
    std::fs::write(&cfg_path, reduced_config(tmp.path())).unwrap();
    // train-corvus before pretrain: no model checkpoint yet
    let out = run(&["--config", cfg_path.to_str().unwrap(), "train-corvus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}
