//! Run configuration: one flat key=value file that pins every knob of a
//! pipeline run. A run is reproducible from this file plus checkpoints, so
//! the canonical serialization doubles as the provenance hash input.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::benchmark::BenchmarkConfig;
use crate::data::ood::OodConfig;
use crate::error::{CorvusError, Result};
use crate::model::adapter::{AdapterConfig, TargetModule};
use crate::model::config::ModelConfig;
use crate::model::params::hex;
use crate::trainer::{CorvusConfig, PretrainConfig};

/// Evaluation-stage knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub target_fpr: f64,
    /// Greedy decode budget per prompt in the utility check.
    pub utility_max_new: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { target_fpr: 0.05, utility_max_new: 16 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Seed for auditor fitting (probe init, semantic-entropy sampling).
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub bench: BenchmarkConfig,
    pub ood: OodConfig,
    pub pretrain: PretrainConfig,
    pub adapter: AdapterConfig,
    pub corvus: CorvusConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 5,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            model: ModelConfig::desk_scale(),
            bench: BenchmarkConfig::default(),
            ood: OodConfig::default(),
            pretrain: PretrainConfig::default(),
            adapter: AdapterConfig::default_qk(),
            corvus: CorvusConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn targets_tag(targets: &[TargetModule]) -> String {
    targets.iter().map(|t| t.tag()).collect::<Vec<_>>().join(",")
}

fn parse_targets(s: &str) -> Result<Vec<TargetModule>> {
    s.split(',').map(|t| TargetModule::from_tag(t.trim())).collect()
}

impl RunConfig {
    /// Canonical flat form; key order is fixed so equal configs hash
    /// equally.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let kv: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("model.vocab_size", self.model.vocab_size.to_string()),
            ("model.d_model", self.model.d_model.to_string()),
            ("model.n_layers", self.model.n_layers.to_string()),
            ("model.n_heads", self.model.n_heads.to_string()),
            ("model.max_seq_len", self.model.max_seq_len.to_string()),
            ("bench.n_examples", self.bench.n_examples.to_string()),
            ("bench.n_pairs", self.bench.n_pairs.to_string()),
            ("bench.value_len", self.bench.value_len.to_string()),
            ("bench.seed", self.bench.seed.to_string()),
            ("ood.n_examples", self.ood.n_examples.to_string()),
            ("ood.span_min", self.ood.span_min.to_string()),
            ("ood.span_max", self.ood.span_max.to_string()),
            ("ood.seed", self.ood.seed.to_string()),
            ("pretrain.max_updates", self.pretrain.max_updates.to_string()),
            ("pretrain.learning_rate", self.pretrain.learning_rate.to_string()),
            ("pretrain.grad_accum", self.pretrain.grad_accum.to_string()),
            ("pretrain.eval_every", self.pretrain.eval_every.to_string()),
            ("pretrain.target_accuracy", self.pretrain.target_accuracy.to_string()),
            ("pretrain.instruction_mix", self.pretrain.instruction_mix.to_string()),
            ("pretrain.instruction_examples", self.pretrain.instruction_examples.to_string()),
            ("pretrain.instruction_seed", self.pretrain.instruction_seed.to_string()),
            ("pretrain.fresh_qa_mix", self.pretrain.fresh_qa_mix.to_string()),
            ("pretrain.fresh_qa_seed", self.pretrain.fresh_qa_seed.to_string()),
            ("pretrain.seed", self.pretrain.seed.to_string()),
            ("adapter.rank", self.adapter.rank.to_string()),
            ("adapter.alpha", self.adapter.alpha.to_string()),
            ("adapter.targets", targets_tag(&self.adapter.targets)),
            ("corvus.beta_te", self.corvus.beta_te.to_string()),
            ("corvus.beta_hv", self.corvus.beta_hv.to_string()),
            ("corvus.lambda_adv", self.corvus.lambda_adv.to_string()),
            ("corvus.epsilon", self.corvus.epsilon.to_string()),
            ("corvus.learning_rate", self.corvus.learning_rate.to_string()),
            ("corvus.grad_accum", self.corvus.grad_accum.to_string()),
            ("corvus.weight_decay", self.corvus.weight_decay.to_string()),
            ("corvus.epochs", self.corvus.epochs.to_string()),
            ("corvus.band_lo", self.corvus.band_lo.to_string()),
            ("corvus.band_hi", self.corvus.band_hi.to_string()),
            ("corvus.seed", self.corvus.seed.to_string()),
            ("eval.target_fpr", self.eval.target_fpr.to_string()),
            ("eval.utility_max_new", self.eval.utility_max_new.to_string()),
        ];
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses the flat form on top of defaults; later lines win. Unknown
    /// keys and bad values report their line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line.split_once('=').ok_or(CorvusError::Parse {
                line: lineno,
                detail: "expected key = value".to_string(),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| CorvusError::Parse { line: lineno, detail: e.to_string() })?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e| CorvusError::input(format!("bad value {value:?}: {e}")))
        }
        match key {
            "seed" => self.seed = p(value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "model.vocab_size" => self.model.vocab_size = p(value)?,
            "model.d_model" => self.model.d_model = p(value)?,
            "model.n_layers" => self.model.n_layers = p(value)?,
            "model.n_heads" => self.model.n_heads = p(value)?,
            "model.max_seq_len" => self.model.max_seq_len = p(value)?,
            "bench.n_examples" => self.bench.n_examples = p(value)?,
            "bench.n_pairs" => self.bench.n_pairs = p(value)?,
            "bench.value_len" => self.bench.value_len = p(value)?,
            "bench.seed" => self.bench.seed = p(value)?,
            "ood.n_examples" => self.ood.n_examples = p(value)?,
            "ood.span_min" => self.ood.span_min = p(value)?,
            "ood.span_max" => self.ood.span_max = p(value)?,
            "ood.seed" => self.ood.seed = p(value)?,
            "pretrain.max_updates" => self.pretrain.max_updates = p(value)?,
            "pretrain.learning_rate" => self.pretrain.learning_rate = p(value)?,
            "pretrain.grad_accum" => self.pretrain.grad_accum = p(value)?,
            "pretrain.eval_every" => self.pretrain.eval_every = p(value)?,
            "pretrain.target_accuracy" => self.pretrain.target_accuracy = p(value)?,
            "pretrain.instruction_mix" => self.pretrain.instruction_mix = p(value)?,
            "pretrain.instruction_examples" => self.pretrain.instruction_examples = p(value)?,
            "pretrain.instruction_seed" => self.pretrain.instruction_seed = p(value)?,
            "pretrain.fresh_qa_mix" => self.pretrain.fresh_qa_mix = p(value)?,
            "pretrain.fresh_qa_seed" => self.pretrain.fresh_qa_seed = p(value)?,
            "pretrain.seed" => self.pretrain.seed = p(value)?,
            "adapter.rank" => self.adapter.rank = p(value)?,
            "adapter.alpha" => self.adapter.alpha = p(value)?,
            "adapter.targets" => self.adapter.targets = parse_targets(value)?,
            "corvus.beta_te" => self.corvus.beta_te = p(value)?,
            "corvus.beta_hv" => self.corvus.beta_hv = p(value)?,
            "corvus.lambda_adv" => self.corvus.lambda_adv = p(value)?,
            "corvus.epsilon" => self.corvus.epsilon = p(value)?,
            "corvus.learning_rate" => self.corvus.learning_rate = p(value)?,
            "corvus.grad_accum" => self.corvus.grad_accum = p(value)?,
            "corvus.weight_decay" => self.corvus.weight_decay = p(value)?,
            "corvus.epochs" => self.corvus.epochs = p(value)?,
            "corvus.band_lo" => self.corvus.band_lo = p(value)?,
            "corvus.band_hi" => self.corvus.band_hi = p(value)?,
            "corvus.seed" => self.corvus.seed = p(value)?,
            "eval.target_fpr" => self.eval.target_fpr = p(value)?,
            "eval.utility_max_new" => self.eval.utility_max_new = p(value)?,
            other => return Err(CorvusError::input(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.serialize())?)
    }

    /// Hash of the canonical serialization; artifacts carry this for
    /// provenance.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.serialize().as_bytes());
        hex(&h.finalize())
    }
}
