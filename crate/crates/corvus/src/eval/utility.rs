//! Generation-quality drift check. Camouflaging telemetry is only
//! interesting if the adapted model still writes like the base model, so
//! this compares greedy decodes and held-out teacher-forced loss between
//! the two variants.

use serde::{Deserialize, Serialize};

use crate::data::benchmark::LabeledExample;
use crate::data::vocab::EOS;
use crate::error::{CorvusError, Result};
use crate::model::adapter::AdapterState;
use crate::model::forward::run_forward;
use crate::model::generate::greedy;
use crate::model::params::Params;
use crate::telemetry::answer_window;
use crate::trainer::loss::answer_cross_entropy;

/// Prompts below this count make the percentile statistics noisy.
pub const UTILITY_MIN_PROMPTS: usize = 100;

/// Generation statistics for one model variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantUtility {
    /// Fraction of prompts whose decode produced no tokens before the
    /// stop token.
    pub empty_fraction: f64,
    /// 95th-percentile (nearest-rank) longest consecutive repeated-token
    /// run across decodes.
    pub repeat_run_p95: usize,
    /// Mean teacher-forced answer cross-entropy on held-out faithful
    /// examples.
    pub heldout_ce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    /// Prompts decoded under both variants (skips excluded).
    pub prompts_scored: usize,
    pub base: VariantUtility,
    pub adapted: VariantUtility,
    /// (adapted - base) / base held-out cross-entropy.
    pub ce_delta_relative: f64,
}

/// Continuation with a trailing stop token stripped.
fn content(out: &[usize], stop: usize) -> &[usize] {
    match out.split_last() {
        Some((&last, rest)) if last == stop => rest,
        _ => out,
    }
}

/// Longest run of one token repeated back to back. Empty input gives 0.
pub fn max_repeat_run(tokens: &[usize]) -> usize {
    let mut best = 0usize;
    let mut run = 0usize;
    let mut prev = None;
    for &t in tokens {
        run = if prev == Some(t) { run + 1 } else { 1 };
        best = best.max(run);
        prev = Some(t);
    }
    best
}

/// Nearest-rank percentile: smallest element with at least `p` of the
/// sample at or below it.
fn percentile_nearest_rank(samples: &[usize], p: f64) -> usize {
    debug_assert!(!samples.is_empty());
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn variant_stats(
    decodes: &[Vec<usize>],
    params: &Params,
    adapter: Option<&AdapterState>,
    heldout: &[LabeledExample],
) -> Result<VariantUtility> {
    let n = decodes.len();
    let empties = decodes.iter().filter(|d| content(d, EOS).is_empty()).count();
    let runs: Vec<usize> = decodes.iter().map(|d| max_repeat_run(content(d, EOS))).collect();
    Ok(VariantUtility {
        empty_fraction: empties as f64 / n as f64,
        repeat_run_p95: percentile_nearest_rank(&runs, 0.95),
        heldout_ce: heldout_ce(params, adapter, heldout)?,
    })
}

/// Mean answer cross-entropy over the faithful rows of `examples` under
/// one variant.
pub fn heldout_ce(
    params: &Params,
    adapter: Option<&AdapterState>,
    examples: &[LabeledExample],
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ex in examples.iter().filter(|e| !e.hallucinated) {
        let tokens = ex.tokens();
        let window = answer_window(ex.prompt.len(), tokens.len())?;
        let trace = run_forward(params, adapter, &tokens)?;
        sum += answer_cross_entropy(&trace.logits, &tokens, &window)?;
        n += 1;
    }
    if n == 0 {
        return Err(CorvusError::input("no faithful held-out examples to score"));
    }
    Ok(sum / n as f64)
}

/// Greedy-decodes every prompt under the base model and under
/// base+adapter, then compares decoding health and held-out loss. Prompts
/// that fail to decode under either variant are skipped with a log line.
pub fn utility_check(
    params: &Params,
    adapter: Option<&AdapterState>,
    prompts: &[Vec<usize>],
    heldout: &[LabeledExample],
    max_new: usize,
) -> Result<UtilityReport> {
    if prompts.is_empty() {
        return Err(CorvusError::input("utility check needs at least one prompt"));
    }
    if prompts.len() < UTILITY_MIN_PROMPTS {
        log::warn!(
            "utility check on {} prompts; statistics want at least {}",
            prompts.len(),
            UTILITY_MIN_PROMPTS
        );
    }
    let mut base_out = Vec::with_capacity(prompts.len());
    let mut adapted_out = Vec::with_capacity(prompts.len());
    for (i, prompt) in prompts.iter().enumerate() {
        let b = greedy(params, None, prompt, max_new, EOS);
        let a = greedy(params, adapter, prompt, max_new, EOS);
        match (b, a) {
            (Ok(b), Ok(a)) => {
                base_out.push(b);
                adapted_out.push(a);
            }
            (b, a) => {
                let err = b.err().or(a.err()).expect("one side failed");
                log::warn!("skipping prompt {i}: {err}");
            }
        }
    }
    if base_out.is_empty() {
        return Err(CorvusError::input("every prompt failed to decode"));
    }
    let base = variant_stats(&base_out, params, None, heldout)?;
    let adapted = variant_stats(&adapted_out, params, adapter, heldout)?;
    Ok(UtilityReport {
        prompts_scored: base_out.len(),
        base,
        adapted,
        ce_delta_relative: (adapted.heldout_ce - base.heldout_ce) / base.heldout_ce,
    })
}
