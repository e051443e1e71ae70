//! Adapter training: camouflage telemetry while the base stays frozen.
//!
//! Per example, one recorded graph carries both passes:
//!
//! 1. clean pass through the adapted model from an embedding leaf E,
//! 2. reverse sweep of the attack surrogate φ to get ∇_E φ,
//! 3. signed step E' = E + ε·sign(∇_E φ), re-entered as a constant,
//! 4. attacked pass, sharing the same parameter leaves,
//! 5. reverse sweep of the combined objective into the adapter leaves only.
//!
//! The training set is unlabeled instruction data; benchmark labels cannot
//! reach this loop even by accident because the input type has no label
//! field.

use std::path::Path;

use super::config::CorvusConfig;
use super::fgsm::fgsm_step;
use super::loss::{total_node, LossBreakdown};
use super::optim::{cosine_lr, AdamW};
use crate::data::ood::UnlabeledExample;
use crate::error::{CorvusError, Result};
use crate::linalg::Mat;
use crate::model::adapter::{AdapterConfig, AdapterState};
use crate::model::forward::{
    adapter_grads, embed_tokens, forward_from_embeddings, stage_adapters, stage_params,
};
use crate::model::params::Params;
use crate::rng;
use crate::tape::{NodeId, Tape};
use crate::telemetry::{
    ad_node, answer_window, fmt_f64, hv_node, mean_node, select_layer_band, te_node, AD_DELTA,
    HV_ETA,
};

/// Gradients and diagnostics from one example's double pass.
#[derive(Debug)]
pub struct StepOutcome {
    /// d(total)/d(adapter), in adapter `named_tensors` order.
    pub grads: Vec<Mat>,
    pub loss: LossBreakdown,
    /// Attack surrogate value on the clean pass.
    pub phi: f64,
}

/// One example, two passes, gradients for the adapter only.
pub fn train_step(
    base: &Params,
    adapter: &AdapterState,
    example: &UnlabeledExample,
    cfg: &CorvusConfig,
    band: &[usize],
) -> Result<StepOutcome> {
    let tokens = example.tokens();
    let window = answer_window(example.prompt.len(), tokens.len())?;

    let mut tape = Tape::new();
    let params = stage_params(&mut tape, base, false);
    let ad_nodes = stage_adapters(&mut tape, adapter, true);

    // embedding leaf: same arithmetic as the token path, then promoted to
    // a differentiable input
    let e0 = embed_tokens(&mut tape, &params, &tokens)?;
    let e_mat = tape.value(e0).clone();
    let e_leaf = tape.leaf(e_mat.clone(), true);
    let clean = forward_from_embeddings(&mut tape, &params, Some(&ad_nodes), e_leaf)?;

    let ad_clean: Vec<NodeId> = band
        .iter()
        .map(|&l| ad_node(&mut tape, &clean, l, &window, AD_DELTA))
        .collect::<Result<_>>()?;
    let phi_parts: Vec<(NodeId, f64)> = ad_clean.iter().map(|&n| (n, -1.0)).collect();
    let phi = tape.lin_comb(&phi_parts);

    tape.backward(phi);
    let grad_e = tape
        .grad(e_leaf)
        .cloned()
        .ok_or_else(|| CorvusError::training("attack surrogate produced no input gradient"))?;
    tape.zero_grads();

    let e_attacked = tape.constant(fgsm_step(&e_mat, &grad_e, cfg.epsilon));
    let attacked = forward_from_embeddings(&mut tape, &params, Some(&ad_nodes), e_attacked)?;

    let ce = tape.cross_entropy_shifted(clean.logits, &tokens, window.start, window.end);
    let te = te_node(&mut tape, &clean, &window);
    let hv_each: Vec<NodeId> = band
        .iter()
        .map(|&l| hv_node(&mut tape, &clean, l, &window, HV_ETA))
        .collect::<Result<_>>()?;
    let hv_mean = mean_node(&mut tape, &hv_each);
    let ad_adv_each: Vec<NodeId> = band
        .iter()
        .map(|&l| ad_node(&mut tape, &attacked, l, &window, AD_DELTA))
        .collect::<Result<_>>()?;
    let ad_adv_mean = mean_node(&mut tape, &ad_adv_each);
    let ad_clean_mean = mean_node(&mut tape, &ad_clean);
    let total = total_node(&mut tape, cfg, ce, te, hv_mean, ad_adv_mean);

    tape.backward(total);
    let grads = adapter_grads(&tape, &ad_nodes);

    let loss = LossBreakdown::combine(
        cfg,
        tape.scalar(ce),
        tape.scalar(te),
        tape.scalar(hv_mean),
        tape.scalar(ad_clean_mean),
        tape.scalar(ad_adv_mean),
    );
    debug_assert!((loss.total - tape.scalar(total)).abs() <= 1e-12 * loss.total.abs().max(1.0));
    Ok(StepOutcome { grads, loss, phi: tape.scalar(phi) })
}

/// One optimizer update's worth of telemetry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogEntry {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub te: f64,
    pub hv_mean: f64,
    pub ad_clean: f64,
    pub ad_adv: f64,
    pub total: f64,
}

/// Full adapter run over the instruction set. Returns the trained adapter
/// and the per-update log; verifies the base parameters never moved.
pub fn train_corvus(
    base: &Params,
    examples: &[UnlabeledExample],
    adapter_cfg: AdapterConfig,
    cfg: &CorvusConfig,
) -> Result<(AdapterState, Vec<TrainLogEntry>)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(CorvusError::training("no training examples"));
    }
    let band = select_layer_band(base.config.n_layers, cfg.band_lo, cfg.band_hi)?;
    let mut adapter = AdapterState::init(&base.config, adapter_cfg, cfg.seed)?;
    let base_hash = base.content_hash();

    let shapes: Vec<(usize, usize)> = adapter
        .named_tensors()
        .iter()
        .map(|(_, m)| (m.rows, m.cols))
        .collect();
    let mut opt = AdamW::new(&shapes, cfg.weight_decay);
    let total_updates = (examples.len() * cfg.epochs).div_ceil(cfg.grad_accum);

    let mut log = Vec::with_capacity(total_updates);
    let mut update = 0usize;
    let mut acc: Option<Vec<Mat>> = None;
    let mut acc_count = 0usize;
    let mut acc_loss = [0.0f64; 6];

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut stream = rng::stream(cfg.seed, &format!("corvus.epoch.{epoch}"));
        rng::shuffle(&mut stream, &mut order);

        for &idx in &order {
            let out = train_step(base, &adapter, &examples[idx], cfg, &band)?;
            match &mut acc {
                None => acc = Some(out.grads),
                Some(a) => {
                    for (am, gm) in a.iter_mut().zip(&out.grads) {
                        for (av, gv) in am.data.iter_mut().zip(&gm.data) {
                            *av += gv;
                        }
                    }
                }
            }
            acc_count += 1;
            for (slot, v) in acc_loss.iter_mut().zip([
                out.loss.ce,
                out.loss.te,
                out.loss.hv_mean,
                out.loss.ad_clean_mean,
                out.loss.ad_adv_mean,
                out.loss.total,
            ]) {
                *slot += v;
            }

            if acc_count == cfg.grad_accum {
                let lr = cosine_lr(cfg.learning_rate, update, total_updates);
                apply_update(&mut adapter, &mut opt, acc.take().unwrap(), acc_count, lr)?;
                let n = acc_count as f64;
                log.push(TrainLogEntry {
                    step: update,
                    lr,
                    ce: acc_loss[0] / n,
                    te: acc_loss[1] / n,
                    hv_mean: acc_loss[2] / n,
                    ad_clean: acc_loss[3] / n,
                    ad_adv: acc_loss[4] / n,
                    total: acc_loss[5] / n,
                });
                acc_count = 0;
                acc_loss = [0.0; 6];
                update += 1;
            }
        }
    }
    // leftover partial accumulation still becomes an update
    if acc_count > 0 {
        let lr = cosine_lr(cfg.learning_rate, update, total_updates);
        apply_update(&mut adapter, &mut opt, acc.take().unwrap(), acc_count, lr)?;
        let n = acc_count as f64;
        log.push(TrainLogEntry {
            step: update,
            lr,
            ce: acc_loss[0] / n,
            te: acc_loss[1] / n,
            hv_mean: acc_loss[2] / n,
            ad_clean: acc_loss[3] / n,
            ad_adv: acc_loss[4] / n,
            total: acc_loss[5] / n,
        });
    }

    if base.content_hash() != base_hash {
        return Err(CorvusError::training("base parameters changed during adapter training"));
    }
    Ok((adapter, log))
}

fn apply_update(
    adapter: &mut AdapterState,
    opt: &mut AdamW,
    mut grads: Vec<Mat>,
    count: usize,
    lr: f64,
) -> Result<()> {
    let inv = 1.0 / count as f64;
    for g in &mut grads {
        for v in &mut g.data {
            *v *= inv;
        }
        if !v_finite(g) {
            return Err(CorvusError::training("non-finite adapter gradient"));
        }
    }
    let mut tensors = adapter.named_tensors_mut();
    let mut refs: Vec<&mut Mat> = tensors.iter_mut().map(|(_, m)| &mut **m).collect();
    opt.step(&mut refs, &grads, lr);
    Ok(())
}

fn v_finite(m: &Mat) -> bool {
    m.data.iter().all(|v| v.is_finite())
}

/// Per-update JSONL log with full-precision floats.
pub fn write_train_log(path: &Path, log: &[TrainLogEntry]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in log {
        writeln!(
            w,
            "{{\"step\":{},\"lr\":{},\"ce\":{},\"te\":{},\"hv_mean\":{},\"ad_clean\":{},\"ad_adv\":{},\"total\":{}}}",
            e.step,
            fmt_f64(e.lr),
            fmt_f64(e.ce),
            fmt_f64(e.te),
            fmt_f64(e.hv_mean),
            fmt_f64(e.ad_clean),
            fmt_f64(e.ad_adv),
            fmt_f64(e.total)
        )?;
    }
    w.flush()?;
    Ok(())
}
