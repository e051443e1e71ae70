//! Camouflage objective and its value-level breakdown.

use std::ops::Range;

use super::config::CorvusConfig;
use crate::error::Result;
use crate::linalg::Mat;
use crate::model::forward::ForwardTrace;
use crate::tape::{NodeId, Tape};
use crate::telemetry::{
    attention_diagonality, hidden_log_volume, token_entropy, AD_DELTA, HV_ETA,
};

/// Every term of one step's objective, before and after combination.
/// `ad_clean_mean` is logged for analysis but never enters `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub te: f64,
    pub hv_mean: f64,
    pub ad_clean_mean: f64,
    pub ad_adv_mean: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// total = ce + βte·te − βhv·hv̄ − λ·ad̄_attacked.
    pub fn combine(cfg: &CorvusConfig, ce: f64, te: f64, hv_mean: f64, ad_clean_mean: f64, ad_adv_mean: f64) -> Self {
        let total =
            ce + cfg.beta_te * te - cfg.beta_hv * hv_mean - cfg.lambda_adv * ad_adv_mean;
        LossBreakdown { ce, te, hv_mean, ad_clean_mean, ad_adv_mean, total }
    }
}

/// Teacher-forced answer cross entropy from a logits matrix: row t−1
/// scores token t, averaged over the window.
pub fn answer_cross_entropy(logits: &Mat, tokens: &[usize], window: &Range<usize>) -> Result<f64> {
    let mut tape = Tape::new();
    let id = tape.leaf(logits.clone(), false);
    let ce = tape.cross_entropy_shifted(id, tokens, window.start, window.end);
    Ok(tape.scalar(ce))
}

/// Value-level objective over two already-computed traces. This is the
/// reference the tape-composed training loss is checked against.
pub fn corvus_loss(
    cfg: &CorvusConfig,
    clean: &ForwardTrace,
    attacked: &ForwardTrace,
    tokens: &[usize],
    window: &Range<usize>,
    band: &[usize],
) -> Result<LossBreakdown> {
    let ce = answer_cross_entropy(&clean.logits, tokens, window)?;
    let te = token_entropy(&clean.logits, window)?;
    let mut hv_sum = 0.0;
    let mut ad_clean_sum = 0.0;
    let mut ad_adv_sum = 0.0;
    for &l in band {
        hv_sum += hidden_log_volume(&clean.hidden[l], window, HV_ETA)?;
        ad_clean_sum += attention_diagonality(&clean.attn[l - 1], window, AD_DELTA)?;
        ad_adv_sum += attention_diagonality(&attacked.attn[l - 1], window, AD_DELTA)?;
    }
    let n = band.len() as f64;
    Ok(LossBreakdown::combine(
        cfg,
        ce,
        te,
        hv_sum / n,
        ad_clean_sum / n,
        ad_adv_sum / n,
    ))
}

/// Tape-side combination of already-built scalar nodes.
pub fn total_node(
    tape: &mut Tape,
    cfg: &CorvusConfig,
    ce: NodeId,
    te: NodeId,
    hv_mean: NodeId,
    ad_adv_mean: NodeId,
) -> NodeId {
    tape.lin_comb(&[
        (ce, 1.0),
        (te, cfg.beta_te),
        (hv_mean, -cfg.beta_hv),
        (ad_adv_mean, -cfg.lambda_adv),
    ])
}
