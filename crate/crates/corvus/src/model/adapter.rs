//! Low-rank adapters over frozen base projections.
//!
//! The adapted projection is W + (α/r)·B·A with B zero-initialized, so a
//! fresh adapter is exactly the identity on the base model's behavior.

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::{hex, Params, INIT_STD};
use crate::error::{CorvusError, Result};
use crate::linalg::{matmul, Mat};
use crate::rng;

/// Which attention projection a low-rank pair attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TargetModule {
    Query,
    Key,
    Value,
    Output,
}

impl TargetModule {
    pub fn tag(&self) -> &'static str {
        match self {
            TargetModule::Query => "q",
            TargetModule::Key => "k",
            TargetModule::Value => "v",
            TargetModule::Output => "o",
        }
    }

    pub fn from_tag(t: &str) -> Result<Self> {
        match t {
            "q" => Ok(TargetModule::Query),
            "k" => Ok(TargetModule::Key),
            "v" => Ok(TargetModule::Value),
            "o" => Ok(TargetModule::Output),
            other => Err(CorvusError::input(format!("unknown adapter target '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<TargetModule>,
}

impl AdapterConfig {
    /// Desk-scale default: rank 8, α 16 (the α/r ratio is what matters and
    /// stays at 2), applied to the query and key projections.
    pub fn default_qk() -> Self {
        AdapterConfig { rank: 8, alpha: 16.0, targets: vec![TargetModule::Query, TargetModule::Key] }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.rank == 0 || self.rank > d_model {
            return Err(CorvusError::input(format!(
                "adapter rank {} out of range for d_model {d_model}",
                self.rank
            )));
        }
        if self.targets.is_empty() {
            return Err(CorvusError::input("adapter needs at least one target"));
        }
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            return Err(CorvusError::input("duplicate adapter targets"));
        }
        Ok(())
    }
}

/// One low-rank pair: down projection `b` (D×r) and up projection `a` (r×D).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub a: Mat,
    pub b: Mat,
}

impl AdapterPair {
    /// Dense D×D update (α/r)·B·A, materialized for merging and oracles.
    pub fn delta(&self, scaling: f64) -> Mat {
        let d = self.b.rows;
        let r = self.b.cols;
        let mut out = Mat::zeros(d, d);
        matmul(&self.b.data, &self.a.data, &mut out.data, d, r, d);
        for v in &mut out.data {
            *v *= scaling;
        }
        out
    }
}

/// Per-layer slots in a fixed order so iteration is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerAdapters {
    pub q: Option<AdapterPair>,
    pub k: Option<AdapterPair>,
    pub v: Option<AdapterPair>,
    pub o: Option<AdapterPair>,
}

impl LayerAdapters {
    pub fn get(&self, t: TargetModule) -> Option<&AdapterPair> {
        match t {
            TargetModule::Query => self.q.as_ref(),
            TargetModule::Key => self.k.as_ref(),
            TargetModule::Value => self.v.as_ref(),
            TargetModule::Output => self.o.as_ref(),
        }
    }

    fn slot_mut(&mut self, t: TargetModule) -> &mut Option<AdapterPair> {
        match t {
            TargetModule::Query => &mut self.q,
            TargetModule::Key => &mut self.k,
            TargetModule::Value => &mut self.v,
            TargetModule::Output => &mut self.o,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub config: AdapterConfig,
    pub layers: Vec<LayerAdapters>,
}

impl AdapterState {
    /// A pairs Gaussian, B pairs zero, so the initial adapted model equals
    /// the base model exactly.
    pub fn init(model: &ModelConfig, config: AdapterConfig, seed: u64) -> Result<Self> {
        config.validate(model.d_model)?;
        let d = model.d_model;
        let r = config.rank;
        let mut layers = Vec::with_capacity(model.n_layers);
        for l in 0..model.n_layers {
            let mut la = LayerAdapters::default();
            for &t in &config.targets {
                let mut a = Mat::zeros(r, d);
                let mut stream = rng::stream(seed, &format!("adapter.{l}.{}.a", t.tag()));
                rng::fill_normal(&mut stream, INIT_STD, &mut a.data);
                *la.slot_mut(t) = Some(AdapterPair { a, b: Mat::zeros(d, r) });
            }
            layers.push(la);
        }
        Ok(AdapterState { config, layers })
    }

    /// Stable (name, tensor) listing for checkpoints and optimizers.
    pub fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (l, la) in self.layers.iter().enumerate() {
            for t in [TargetModule::Query, TargetModule::Key, TargetModule::Value, TargetModule::Output] {
                if let Some(p) = la.get(t) {
                    out.push((format!("adapter.{l}.{}.a", t.tag()), &p.a));
                    out.push((format!("adapter.{l}.{}.b", t.tag()), &p.b));
                }
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        for (l, la) in self.layers.iter_mut().enumerate() {
            for (slot, tag) in [
                (&mut la.q, "q"),
                (&mut la.k, "k"),
                (&mut la.v, "v"),
                (&mut la.o, "o"),
            ] {
                if let Some(p) = slot {
                    out.push((format!("adapter.{l}.{tag}.a"), &mut p.a));
                    out.push((format!("adapter.{l}.{tag}.b"), &mut p.b));
                }
            }
        }
        out
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update((m.rows as u64).to_le_bytes());
            h.update((m.cols as u64).to_le_bytes());
            for v in &m.data {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.data.len()).sum()
    }
}

/// Dense merge: base weights plus every adapter delta. Produces a plain
/// model that behaves like base+adapter, used by oracle tests and export.
pub fn effective_weights(base: &Params, adapter: &AdapterState) -> Result<Params> {
    if adapter.layers.len() != base.config.n_layers {
        return Err(CorvusError::contract("adapter layer count does not match model"));
    }
    let scaling = adapter.config.scaling();
    let mut merged = base.clone();
    for (l, la) in adapter.layers.iter().enumerate() {
        let lp = &mut merged.layers[l];
        for (t, w) in [
            (TargetModule::Query, &mut lp.wq),
            (TargetModule::Key, &mut lp.wk),
            (TargetModule::Value, &mut lp.wv),
            (TargetModule::Output, &mut lp.wo),
        ] {
            if let Some(pair) = la.get(t) {
                let delta = pair.delta(scaling);
                for (wv, dv) in w.data.iter_mut().zip(&delta.data) {
                    *wv += dv;
                }
            }
        }
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { vocab_size: 16, d_model: 8, n_layers: 2, n_heads: 2, max_seq_len: 8 }
    }

    #[test]
    fn fresh_adapter_merges_to_identity() {
        let cfg = small();
        let base = Params::init(cfg, 1);
        let ad = AdapterState::init(&cfg, AdapterConfig::default_qk(), 2).unwrap();
        let merged = effective_weights(&base, &ad).unwrap();
        assert_eq!(base, merged);
    }

    #[test]
    fn nonzero_b_changes_targets_only() {
        let cfg = small();
        let base = Params::init(cfg, 1);
        let mut ad = AdapterState::init(&cfg, AdapterConfig::default_qk(), 2).unwrap();
        ad.layers[0].q.as_mut().unwrap().b.data[0] = 0.5;
        let merged = effective_weights(&base, &ad).unwrap();
        assert_ne!(base.layers[0].wq, merged.layers[0].wq);
        assert_eq!(base.layers[0].wk, merged.layers[0].wk);
        assert_eq!(base.layers[0].wv, merged.layers[0].wv);
        assert_eq!(base.layers[1].wq, merged.layers[1].wq);
        assert_eq!(base.tok_emb, merged.tok_emb);
    }

    #[test]
    fn rank_zero_rejected() {
        let cfg = small();
        let bad = AdapterConfig { rank: 0, alpha: 16.0, targets: vec![TargetModule::Query] };
        assert!(AdapterState::init(&cfg, bad, 0).is_err());
    }

    #[test]
    fn scaling_ratio_preserved() {
        assert_eq!(AdapterConfig::default_qk().scaling(), 2.0);
    }
}
