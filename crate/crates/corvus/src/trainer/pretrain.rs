//! Full-parameter pretraining of the base model.
//!
//! The base learns two things before any adapter work starts: answer the
//! key-value questions faithfully, and follow the copy/reverse instruction
//! templates. Training mixes three streams: the faithful half of the fixed
//! question set, freshly generated questions from a disjoint seed, and a
//! separately seeded instruction stream. The fresh stream is what forces a
//! retrieval circuit instead of memorization; a small fixed split alone
//! reaches near-zero training loss while held-out accuracy stays at chance.
//! Progress is gated on teacher-forced answer accuracy over held-out
//! faithful questions.

use serde::{Deserialize, Serialize};

use super::loss::answer_cross_entropy;
use super::optim::{cosine_lr, AdamW};
use crate::data::benchmark::{generate_example, BenchmarkConfig, LabeledExample};
use crate::data::ood::{generate_ood_instructions, OodConfig};
use crate::error::{CorvusError, Result};
use crate::linalg::Mat;
use crate::model::config::ModelConfig;
use crate::model::forward::{forward_tokens, param_grads, run_forward, stage_params};
use crate::model::params::Params;
use crate::rng;
use crate::tape::Tape;
use crate::telemetry::answer_window;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub max_updates: usize,
    pub learning_rate: f64,
    pub grad_accum: usize,
    /// Updates between accuracy checks on held-out faithful questions.
    pub eval_every: usize,
    /// Teacher-forced token accuracy that ends training early.
    pub target_accuracy: f64,
    /// Fraction of draws taken from the instruction stream.
    pub instruction_mix: f64,
    pub instruction_examples: usize,
    pub instruction_seed: u64,
    /// Of the non-instruction draws, the fraction generated on the fly
    /// instead of sampled from the fixed train split.
    pub fresh_qa_mix: f64,
    pub fresh_qa_seed: u64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            max_updates: 4000,
            learning_rate: 1e-3,
            grad_accum: 4,
            eval_every: 100,
            target_accuracy: 0.90,
            instruction_mix: 0.5,
            instruction_examples: 400,
            instruction_seed: 29,
            fresh_qa_mix: 0.7,
            fresh_qa_seed: 31,
            seed: 7,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_updates == 0 || self.grad_accum == 0 || self.eval_every == 0 {
            return Err(CorvusError::input("pretrain counters must be positive"));
        }
        if self.learning_rate <= 0.0 {
            return Err(CorvusError::input("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.instruction_mix) {
            return Err(CorvusError::input("instruction_mix must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.fresh_qa_mix) {
            return Err(CorvusError::input("fresh_qa_mix must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(CorvusError::input("target_accuracy must be in [0, 1]"));
        }
        Ok(())
    }
}

/// One optimizer update on the pretraining curve. `accuracy` is present
/// only on updates where the held-out check ran.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub update: usize,
    pub lr: f64,
    pub ce: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: Params,
    pub curve: Vec<CurvePoint>,
    pub final_accuracy: f64,
    pub reached_target: bool,
}

/// Teacher-forced argmax accuracy over the answer windows of the faithful
/// examples in `examples`. Hallucinated rows are skipped, not scored.
pub fn faithful_token_accuracy(params: &Params, examples: &[LabeledExample]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ex in examples.iter().filter(|e| !e.hallucinated) {
        let tokens = ex.tokens();
        let window = answer_window(ex.prompt.len(), tokens.len())?;
        let trace = run_forward(params, None, &tokens)?;
        for t in window {
            let row = trace.logits.row(t - 1);
            let pred = argmax(row);
            if pred == tokens[t] {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(CorvusError::input("no faithful examples to score"));
    }
    Ok(hits as f64 / total as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Recover the key-value task shape from a faithful example so the fresh
/// stream matches the data without threading the benchmark config through.
fn fresh_stream_config(probe: &LabeledExample, seed: u64) -> Result<BenchmarkConfig> {
    let value_len = probe.answer.len().saturating_sub(1);
    let per_pair = 1 + value_len;
    let n_pairs = match probe.prompt.len().checked_sub(4) {
        Some(body) if value_len > 0 && body % per_pair == 0 => body / per_pair,
        _ => 0,
    };
    let cfg = BenchmarkConfig { n_examples: 20, n_pairs, value_len, seed };
    if n_pairs == 0 || cfg.prompt_len() != probe.prompt.len() {
        return Err(CorvusError::training("train examples do not match the key-value prompt shape"));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Train a fresh base model until the accuracy gate trips or the budget
/// runs out. Deterministic in (config, data, seeds).
pub fn pretrain(
    model: ModelConfig,
    train: &[LabeledExample],
    validation: &[LabeledExample],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    let faithful: Vec<&LabeledExample> = train.iter().filter(|e| !e.hallucinated).collect();
    if faithful.is_empty() {
        return Err(CorvusError::training("no faithful training examples"));
    }
    let instructions = generate_ood_instructions(&OodConfig {
        n_examples: cfg.instruction_examples,
        seed: cfg.instruction_seed,
        ..Default::default()
    })?;
    if cfg.instruction_mix > 0.0 && instructions.is_empty() {
        return Err(CorvusError::training("instruction mix requested but no instructions"));
    }
    let fresh_cfg = if cfg.fresh_qa_mix > 0.0 {
        Some(fresh_stream_config(faithful[0], cfg.fresh_qa_seed)?)
    } else {
        None
    };

    let mut params = Params::init(model, cfg.seed);
    let shapes: Vec<(usize, usize)> = params
        .named_tensors()
        .iter()
        .map(|(_, m)| (m.rows, m.cols))
        .collect();
    let mut opt = AdamW::new(&shapes, 0.0);
    let mut draw = rng::stream(cfg.seed, "pretrain.draw");

    let mut curve = Vec::new();
    let mut final_accuracy = 0.0;
    let mut reached_target = false;
    let mut fresh_drawn = 0usize;

    for update in 0..cfg.max_updates {
        let mut acc: Option<Vec<Mat>> = None;
        let mut ce_sum = 0.0;
        for _ in 0..cfg.grad_accum {
            let (prompt_len, tokens) = if rng::unit(&mut draw) < cfg.instruction_mix {
                let ex = &instructions[rng::index(&mut draw, instructions.len())];
                (ex.prompt.len(), ex.tokens())
            } else if let Some(fc) =
                fresh_cfg.as_ref().filter(|_| rng::unit(&mut draw) < cfg.fresh_qa_mix)
            {
                // even indices are the faithful half of the generator
                let ex = generate_example(fc, 2 * fresh_drawn);
                fresh_drawn += 1;
                (ex.prompt.len(), ex.tokens())
            } else {
                let ex = faithful[rng::index(&mut draw, faithful.len())];
                (ex.prompt.len(), ex.tokens())
            };
            let window = answer_window(prompt_len, tokens.len())?;

            let mut tape = Tape::new();
            let nodes = stage_params(&mut tape, &params, true);
            let trace = forward_tokens(&mut tape, &nodes, None, &tokens)?;
            let ce = tape.cross_entropy_shifted(trace.logits, &tokens, window.start, window.end);
            ce_sum += tape.scalar(ce);
            tape.backward(ce);
            let grads = param_grads(&tape, &nodes);
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => {
                    for (am, gm) in a.iter_mut().zip(&grads) {
                        for (av, gv) in am.data.iter_mut().zip(&gm.data) {
                            *av += gv;
                        }
                    }
                }
            }
        }

        let mut grads = acc.unwrap();
        let inv = 1.0 / cfg.grad_accum as f64;
        for g in &mut grads {
            for v in &mut g.data {
                *v *= inv;
            }
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(CorvusError::training("non-finite pretraining gradient"));
            }
        }
        let lr = cosine_lr(cfg.learning_rate, update, cfg.max_updates);
        {
            let mut tensors = params.named_tensors_mut();
            let mut refs: Vec<&mut Mat> = tensors.iter_mut().map(|(_, m)| &mut **m).collect();
            opt.step(&mut refs, &grads, lr);
        }

        let mut point =
            CurvePoint { update, lr, ce: ce_sum / cfg.grad_accum as f64, accuracy: None };
        let last = update + 1 == cfg.max_updates;
        if (update + 1) % cfg.eval_every == 0 || last {
            let acc_now = faithful_token_accuracy(&params, validation)?;
            point.accuracy = Some(acc_now);
            final_accuracy = acc_now;
            log::info!(
                "pretrain update {} ce {:.4} held-out accuracy {:.3}",
                update + 1,
                point.ce,
                acc_now
            );
            if acc_now >= cfg.target_accuracy {
                reached_target = true;
                curve.push(point);
                break;
            }
        }
        curve.push(point);
    }

    Ok(PretrainOutcome { params, curve, final_accuracy, reached_target })
}

/// Mean teacher-forced answer cross entropy over faithful examples.
pub fn faithful_answer_ce(params: &Params, examples: &[LabeledExample]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ex in examples.iter().filter(|e| !e.hallucinated) {
        let tokens = ex.tokens();
        let window = answer_window(ex.prompt.len(), tokens.len())?;
        let trace = run_forward(params, None, &tokens)?;
        sum += answer_cross_entropy(&trace.logits, &tokens, &window)?;
        n += 1;
    }
    if n == 0 {
        return Err(CorvusError::input("no faithful examples to score"));
    }
    Ok(sum / n as f64)
}
