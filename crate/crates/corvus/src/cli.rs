//! Pipeline driver. Subcommands communicate only through files under the
//! configured data and output directories, so any stage can be rerun in
//! isolation. Every artifact directory gets a provenance record tying the
//! files to the producing run-configuration hash.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::io::{file_hash, write_jsonl};
use crate::data::manifest::{load_benchmark, load_instructions, write_dataset, MANIFEST_FILE};
use crate::error::{CorvusError, Result};
use crate::eval::ablation::{ablation_run, render_ablation_table, standard_specs, AblationRow};
use crate::eval::replay::{fit_auditor, fixed_answer_replay, load_auditor, save_auditor, FittedAuditor};
use crate::eval::report::{build_report, gate_failures, read_report, render_table, write_report, ReportContext, REPORT_JSON};
use crate::eval::utility::utility_check;
use crate::model::adapter::AdapterState;
use crate::model::checkpoint::{load_adapter, load_model, save_adapter, save_model};
use crate::model::params::Params;
use crate::runconfig::RunConfig;
use crate::telemetry::{select_layer_band, ModelVariant};
use crate::trainer::corvus::write_train_log;
use crate::trainer::{pretrain, train_corvus};

pub const MODEL_FILE: &str = "model.bin";
pub const ADAPTER_FILE: &str = "adapter.bin";
pub const AUDITOR_FILE: &str = "auditor.bin";
pub const CURVE_FILE: &str = "pretrain_curve.jsonl";
pub const TRAIN_LOG_FILE: &str = "corvus_log.jsonl";
pub const CONFIG_FILE: &str = "run_config.txt";
pub const PROVENANCE_FILE: &str = "provenance.txt";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TABLE: &str = "ablation.txt";

#[derive(Parser)]
#[command(name = "corvus", version, about = "Telemetry-camouflage red-teaming workbench")]
struct Cli {
    /// Run configuration file (flat key=value). Defaults apply if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the auditor-fitting seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the benchmark and instruction datasets plus manifest.
    GenData,
    /// Pretrain the base model until it solves the grounded task.
    Pretrain,
    /// Train camouflage adapters on the unlabeled instruction set.
    TrainCorvus,
    /// Score one model variant on the test split with the frozen auditor.
    Replay {
        /// Which weights to replay through: "clean" or "adapted".
        #[arg(long, default_value = "clean")]
        variant: String,
    },
    /// Full clean-vs-adapted comparison; writes report.json / report.txt.
    Evaluate {
        /// Exit nonzero when any release gate fails.
        #[arg(long)]
        gate: bool,
    },
    /// Retrain under each ablation variant and tabulate the deltas.
    Ablate {
        /// Comma-separated variant names to run (default: the full battery).
        #[arg(long)]
        only: Option<String>,
    },
    /// Re-render the tables from written artifacts.
    Report,
}

/// Entry point behind `main`; returns the process exit code.
pub fn run_cli() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init()
        .ok();
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match dispatch(&cli.command, &cfg) {
        Ok(Outcome::Done(summary)) => {
            println!("{summary}");
            0
        }
        Ok(Outcome::GateFailed(failures)) => {
            for f in &failures {
                eprintln!("gate: {f}");
            }
            eprintln!("{} gate(s) failed", failures.len());
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

enum Outcome {
    Done(String),
    GateFailed(Vec<String>),
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Writes the effective config into the output directory and appends
/// artifact provenance lines.
fn record_artifacts(cfg: &RunConfig, dir: &Path, names: &[&str]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join(CONFIG_FILE))?;
    let hash = cfg.content_hash();
    let mut text = String::new();
    for name in names {
        let _ = writeln!(text, "{name}\t{hash}");
    }
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join(PROVENANCE_FILE))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn load_base(cfg: &RunConfig) -> Result<Params> {
    let (params, _) = load_model(&cfg.out_dir.join(MODEL_FILE))?;
    if params.config != cfg.model {
        return Err(CorvusError::contract(
            "checkpoint model shape disagrees with the run configuration",
        ));
    }
    Ok(params)
}

fn load_trained_adapter(cfg: &RunConfig) -> Result<AdapterState> {
    let (model_cfg, adapter, _) = load_adapter(&cfg.out_dir.join(ADAPTER_FILE))?;
    if model_cfg != cfg.model {
        return Err(CorvusError::contract(
            "adapter checkpoint model shape disagrees with the run configuration",
        ));
    }
    Ok(adapter)
}

/// Fits the auditor once on clean splits and persists it; afterwards the
/// persisted copy is the single source of scoring state.
fn ensure_auditor(cfg: &RunConfig, params: &Params) -> Result<FittedAuditor> {
    let path = cfg.out_dir.join(AUDITOR_FILE);
    if !path.exists() {
        let splits = load_benchmark(&cfg.data_dir)?;
        let auditor =
            fit_auditor(params, &splits.train, &splits.validation, cfg.seed, cfg.eval.target_fpr)?;
        std::fs::create_dir_all(&cfg.out_dir)?;
        save_auditor(&path, &auditor)?;
        record_artifacts(cfg, &cfg.out_dir, &[AUDITOR_FILE])?;
    }
    load_auditor(&path)
}

fn parse_variant(s: &str) -> Result<ModelVariant> {
    match s {
        "clean" => Ok(ModelVariant::Clean),
        "adapted" => Ok(ModelVariant::Adapted),
        other => Err(CorvusError::input(format!(
            "unknown variant {other:?} (expected clean or adapted)"
        ))),
    }
}

fn dataset_id(cfg: &RunConfig) -> Result<String> {
    file_hash(&cfg.data_dir.join(MANIFEST_FILE))
}

fn dispatch(command: &Command, cfg: &RunConfig) -> Result<Outcome> {
    match command {
        Command::GenData => {
            let manifest = write_dataset(&cfg.data_dir, &cfg.bench, &cfg.ood)?;
            record_artifacts(cfg, &cfg.data_dir, &[MANIFEST_FILE])?;
            Ok(Outcome::Done(format!(
                "dataset: {}/{}/{} benchmark examples, {} instructions, 4-gram overlap {:.4} -> {}",
                manifest.counts.train,
                manifest.counts.validation,
                manifest.counts.test,
                manifest.counts.instructions,
                manifest.four_gram_overlap,
                cfg.data_dir.display()
            )))
        }
        Command::Pretrain => {
            let splits = load_benchmark(&cfg.data_dir)?;
            let outcome = pretrain(cfg.model, &splits.train, &splits.validation, &cfg.pretrain)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            write_jsonl(&cfg.out_dir.join(CURVE_FILE), &outcome.curve)?;
            let meta = vec![
                ("run_config".to_string(), cfg.content_hash()),
                ("final_accuracy".to_string(), format!("{}", outcome.final_accuracy)),
                ("reached_target".to_string(), outcome.reached_target.to_string()),
            ];
            save_model(&cfg.out_dir.join(MODEL_FILE), &outcome.params, &meta)?;
            record_artifacts(cfg, &cfg.out_dir, &[MODEL_FILE, CURVE_FILE])?;
            if !outcome.reached_target {
                return Err(CorvusError::training(format!(
                    "accuracy {:.3} below target {:.3} after {} updates (curve at {})",
                    outcome.final_accuracy,
                    cfg.pretrain.target_accuracy,
                    cfg.pretrain.max_updates,
                    cfg.out_dir.join(CURVE_FILE).display()
                )));
            }
            Ok(Outcome::Done(format!(
                "pretrained: held-out answer accuracy {:.3} -> {}",
                outcome.final_accuracy,
                cfg.out_dir.join(MODEL_FILE).display()
            )))
        }
        Command::TrainCorvus => {
            let params = load_base(cfg)?;
            let instructions = load_instructions(&cfg.data_dir)?;
            let (adapter, log) =
                train_corvus(&params, &instructions, cfg.adapter.clone(), &cfg.corvus)?;
            write_train_log(&cfg.out_dir.join(TRAIN_LOG_FILE), &log)?;
            let meta = vec![("run_config".to_string(), cfg.content_hash())];
            save_adapter(&cfg.out_dir.join(ADAPTER_FILE), &params.config, &adapter, &meta)?;
            record_artifacts(cfg, &cfg.out_dir, &[ADAPTER_FILE, TRAIN_LOG_FILE])?;
            let last = log.last().expect("nonempty training log");
            Ok(Outcome::Done(format!(
                "adapters trained: {} updates, final total loss {:.4} -> {}",
                log.len(),
                last.total,
                cfg.out_dir.join(ADAPTER_FILE).display()
            )))
        }
        Command::Replay { variant } => {
            let variant = parse_variant(variant)?;
            let params = load_base(cfg)?;
            let auditor = ensure_auditor(cfg, &params)?;
            let splits = load_benchmark(&cfg.data_dir)?;
            let adapter = match variant {
                ModelVariant::Clean => None,
                ModelVariant::Adapted => Some(load_trained_adapter(cfg)?),
            };
            let rows =
                fixed_answer_replay(&params, adapter.as_ref(), variant, &splits.test, &auditor)?;
            let name = format!("scores_{}.jsonl", variant.as_str());
            write_jsonl(&cfg.out_dir.join(&name), &rows)?;
            record_artifacts(cfg, &cfg.out_dir, &[&name])?;
            Ok(Outcome::Done(format!(
                "replayed {} test examples ({}) -> {}",
                rows.len(),
                variant.as_str(),
                cfg.out_dir.join(&name).display()
            )))
        }
        Command::Evaluate { gate } => {
            let params = load_base(cfg)?;
            let adapter = load_trained_adapter(cfg)?;
            let auditor = ensure_auditor(cfg, &params)?;
            let splits = load_benchmark(&cfg.data_dir)?;
            let prompts: Vec<Vec<usize>> =
                splits.test.iter().map(|e| e.prompt.clone()).collect();
            let utility = utility_check(
                &params,
                Some(&adapter),
                &prompts,
                &splits.test,
                cfg.eval.utility_max_new,
            )?;
            let band =
                select_layer_band(cfg.model.n_layers, cfg.corvus.band_lo, cfg.corvus.band_hi)?;
            let report = build_report(
                &params,
                &adapter,
                &auditor,
                &splits.test,
                &band,
                utility,
                ReportContext {
                    run_config: cfg.content_hash(),
                    dataset: dataset_id(cfg)?,
                    seed: cfg.seed,
                },
            )?;
            let (json_path, table_path) = write_report(&cfg.out_dir, &report)?;
            record_artifacts(cfg, &cfg.out_dir, &[REPORT_JSON, "report.txt"])?;
            if *gate {
                let failures = gate_failures(&report);
                if !failures.is_empty() {
                    return Ok(Outcome::GateFailed(failures));
                }
            }
            Ok(Outcome::Done(format!(
                "evaluated {} test examples -> {} and {}",
                report.metadata.n_test,
                json_path.display(),
                table_path.display()
            )))
        }
        Command::Ablate { only } => {
            let params = load_base(cfg)?;
            let auditor = ensure_auditor(cfg, &params)?;
            let splits = load_benchmark(&cfg.data_dir)?;
            let instructions = load_instructions(&cfg.data_dir)?;
            let mut specs = standard_specs(cfg.corvus.epsilon);
            if let Some(filter) = only {
                let wanted: Vec<&str> = filter.split(',').map(str::trim).collect();
                for name in &wanted {
                    if !specs.iter().any(|s| s.name == *name) {
                        return Err(CorvusError::input(format!(
                            "unknown ablation variant {name:?}"
                        )));
                    }
                }
                specs.retain(|s| wanted.contains(&s.name.as_str()));
            }
            let mut rows: Vec<AblationRow> = Vec::with_capacity(specs.len());
            for spec in &specs {
                log::info!("ablation variant {}", spec.name);
                rows.push(ablation_run(
                    &params,
                    &instructions,
                    cfg.adapter.clone(),
                    &cfg.corvus,
                    spec,
                    &auditor,
                    &splits.test,
                )?);
            }
            let json = serde_json::to_string_pretty(&rows)
                .map_err(|e| CorvusError::input(format!("ablation serialize failed: {e}")))?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            std::fs::write(cfg.out_dir.join(ABLATION_JSON), json)?;
            std::fs::write(cfg.out_dir.join(ABLATION_TABLE), render_ablation_table(&rows))?;
            record_artifacts(cfg, &cfg.out_dir, &[ABLATION_JSON, ABLATION_TABLE])?;
            Ok(Outcome::Done(format!(
                "{} ablation variants -> {}",
                rows.len(),
                cfg.out_dir.join(ABLATION_TABLE).display()
            )))
        }
        Command::Report => {
            let report = read_report(&cfg.out_dir.join(REPORT_JSON))?;
            let mut out = render_table(&report);
            let ablation_path = cfg.out_dir.join(ABLATION_JSON);
            if ablation_path.exists() {
                let raw = std::fs::read_to_string(&ablation_path)?;
                let rows: Vec<AblationRow> = serde_json::from_str(&raw)
                    .map_err(|e| CorvusError::Parse { line: 0, detail: e.to_string() })?;
                out.push('\n');
                out.push_str(&render_ablation_table(&rows));
            }
            Ok(Outcome::Done(out))
        }
    }
}
