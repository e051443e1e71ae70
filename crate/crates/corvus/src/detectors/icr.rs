//! Residual-attention mismatch probe.
//!
//! For each answer token and layer, two distributions over the causal
//! prefix are compared: where the residual update "points" (softmax of
//! inner products between the update and every candidate hidden state) and
//! where attention actually routed (head-averaged row). Both are cut down
//! to the attention top-k and renormalized; their Jensen-Shannon
//! divergence, pooled per layer, is the feature vector a small MLP maps to
//! a hallucination probability.

use std::ops::Range;

use crate::error::{CorvusError, Result};
use crate::linalg::Mat;
use crate::model::forward::ForwardTrace;
use crate::rng;
use crate::telemetry::ModelVariant;

/// Attention-mass cutoff for both distributions.
pub const ICR_TOP_K: usize = 20;

const MLP_HIDDEN: usize = 32;
const MLP_LR: f64 = 0.2;
const MLP_ITERS: usize = 800;
const MLP_L2: f64 = 1e-3;
const MLP_INIT_STD: f64 = 0.2;

/// Jensen-Shannon divergence in nats, mixture weights ½/½. Zero entries
/// contribute nothing; the value is bounded by ln 2.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut d = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let mi = 0.5 * (pi + qi);
        if pi > 0.0 {
            d += 0.5 * pi * (pi / mi).ln();
        }
        if qi > 0.0 {
            d += 0.5 * qi * (qi / mi).ln();
        }
    }
    d
}

/// Indices of the k largest entries, ties resolved toward lower indices.
fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k.min(row.len()));
    idx
}

/// Restriction of `row` to `keep`, renormalized. A zero-mass restriction
/// falls back to uniform over the kept set.
fn restrict_renorm(row: &[f64], keep: &[usize]) -> Vec<f64> {
    let vals: Vec<f64> = keep.iter().map(|&j| row[j]).collect();
    let mass: f64 = vals.iter().sum();
    if mass > 0.0 {
        vals.iter().map(|v| v / mass).collect()
    } else {
        vec![1.0 / keep.len() as f64; keep.len()]
    }
}

/// Divergence for one token: both rows are restricted to the attention
/// top-k, renormalized, and compared.
pub fn icr_token(proj: &[f64], attn: &[f64], k: usize) -> Result<f64> {
    if proj.len() != attn.len() || proj.is_empty() {
        return Err(CorvusError::input("candidate sets differ or are empty"));
    }
    if k == 0 {
        return Err(CorvusError::input("top-k must be positive"));
    }
    let keep = top_k_indices(attn, k);
    let p = restrict_renorm(proj, &keep);
    let q = restrict_renorm(attn, &keep);
    Ok(jsd(&p, &q))
}

/// Per-layer pooled divergences for one trace: out[l-1] is the mean over
/// answer tokens at layer l. Entries lie in [0, ln 2].
pub fn icr_features(trace: &ForwardTrace, window: &Range<usize>, k: usize) -> Result<Vec<f64>> {
    let depth = trace.attn.len();
    if trace.hidden.len() != depth + 1 {
        return Err(CorvusError::input("trace is missing hidden layers"));
    }
    if window.start == 0 || window.end > trace.hidden[0].rows || window.is_empty() {
        return Err(CorvusError::input("bad answer window for ICR features"));
    }
    let mut v = Vec::with_capacity(depth);
    for l in 1..=depth {
        let x_now = &trace.hidden[l];
        let x_prev = &trace.hidden[l - 1];
        let heads = &trace.attn[l - 1];
        let n_heads = heads.len() as f64;
        let mut pooled = 0.0;
        for i in window.clone() {
            let delta: Vec<f64> = x_now
                .row(i)
                .iter()
                .zip(x_prev.row(i))
                .map(|(&a, &b)| a - b)
                .collect();
            // scores over the causal prefix j <= i
            let mut s = vec![0.0; i + 1];
            for (j, sj) in s.iter_mut().enumerate() {
                *sj = delta.iter().zip(x_now.row(j)).map(|(&d, &x)| d * x).sum();
            }
            let proj = softmax(&s);
            let attn_avg: Vec<f64> = (0..=i)
                .map(|j| heads.iter().map(|h| h.get(i, j)).sum::<f64>() / n_heads)
                .collect();
            pooled += icr_token(&proj, &attn_avg, k)?;
        }
        v.push(pooled / window.len() as f64);
    }
    Ok(v)
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Two-layer perceptron over the layer feature vector, logistic output.
#[derive(Debug, Clone, PartialEq)]
pub struct IcrProbe {
    pub top_k: usize,
    /// input_dim × hidden
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// hidden → output
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// One training row for the probe, tagged with its telemetry source.
#[derive(Debug, Clone)]
pub struct IcrRecord {
    pub variant: ModelVariant,
    pub features: Vec<f64>,
    pub hallucinated: bool,
}

impl IcrProbe {
    pub fn input_dim(&self) -> usize {
        self.w1.rows
    }
}

/// Hallucination probability from a pooled feature vector.
pub fn icr_score(probe: &IcrProbe, features: &[f64]) -> Result<f64> {
    if features.len() != probe.input_dim() {
        return Err(CorvusError::input(format!(
            "probe expects {} features, got {}",
            probe.input_dim(),
            features.len()
        )));
    }
    let hidden = probe.w1.cols;
    let mut z = 0.0;
    for h in 0..hidden {
        let mut a = probe.b1[h];
        for (j, &f) in features.iter().enumerate() {
            a += f * probe.w1.get(j, h);
        }
        z += a.tanh() * probe.w2[h];
    }
    Ok(sigmoid(z + probe.b2))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Trains the perceptron by seeded full-batch gradient descent. Rejects
/// adapted-model records.
pub fn fit_icr(records: &[IcrRecord], top_k: usize, seed: u64) -> Result<IcrProbe> {
    if records.is_empty() {
        return Err(CorvusError::training("no ICR training records"));
    }
    if records.iter().any(|r| r.variant == ModelVariant::Adapted) {
        return Err(CorvusError::contract("ICR fitting received adapted-model records"));
    }
    let d = records[0].features.len();
    if d == 0 || records.iter().any(|r| r.features.len() != d) {
        return Err(CorvusError::input("ragged ICR feature rows"));
    }
    if records.iter().all(|r| r.hallucinated) || records.iter().all(|r| !r.hallucinated) {
        return Err(CorvusError::training("single-class ICR labels"));
    }

    let mut stream = rng::stream(seed, "icr.init");
    let mut w1 = Mat::zeros(d, MLP_HIDDEN);
    rng::fill_normal(&mut stream, MLP_INIT_STD, &mut w1.data);
    let mut b1 = vec![0.0; MLP_HIDDEN];
    let mut w2 = vec![0.0; MLP_HIDDEN];
    rng::fill_normal(&mut stream, MLP_INIT_STD, &mut w2);
    let mut b2 = 0.0;

    let n = records.len() as f64;
    for _ in 0..MLP_ITERS {
        let mut gw1 = Mat::zeros(d, MLP_HIDDEN);
        let mut gb1 = vec![0.0; MLP_HIDDEN];
        let mut gw2 = vec![0.0; MLP_HIDDEN];
        let mut gb2 = 0.0;
        for r in records {
            let mut act = vec![0.0; MLP_HIDDEN];
            for (h, a) in act.iter_mut().enumerate() {
                let mut pre = b1[h];
                for (j, &f) in r.features.iter().enumerate() {
                    pre += f * w1.get(j, h);
                }
                *a = pre.tanh();
            }
            let z: f64 = act.iter().zip(&w2).map(|(a, w)| a * w).sum::<f64>() + b2;
            let err = (sigmoid(z) - if r.hallucinated { 1.0 } else { 0.0 }) / n;
            gb2 += err;
            for h in 0..MLP_HIDDEN {
                gw2[h] += err * act[h];
                let dpre = err * w2[h] * (1.0 - act[h] * act[h]);
                gb1[h] += dpre;
                for (j, &f) in r.features.iter().enumerate() {
                    gw1.row_mut(j)[h] += dpre * f;
                }
            }
        }
        for (w, g) in w1.data.iter_mut().zip(&gw1.data) {
            *w -= MLP_LR * (g + MLP_L2 * *w);
        }
        for (b, g) in b1.iter_mut().zip(&gb1) {
            *b -= MLP_LR * g;
        }
        for (w, g) in w2.iter_mut().zip(&gw2) {
            *w -= MLP_LR * (g + MLP_L2 * *w);
        }
        b2 -= MLP_LR * gb2;
    }

    Ok(IcrProbe { top_k, w1, b1, w2, b2 })
}
