//! Decoding on top of the instrumented forward pass.
//!
//! No KV cache: every emitted token replays the full prefix through the
//! same forward implementation everything else uses. Desk scale makes that
//! affordable and keeps generation bit-consistent with analysis.

use rand_chacha::ChaCha8Rng;

use super::adapter::AdapterState;
use super::forward::run_forward;
use super::params::Params;
use crate::error::{CorvusError, Result};
use crate::linalg::logsumexp;
use crate::rng;

/// Greedy continuation of `prompt`. Stops after `max_new` tokens or when
/// `stop` is produced (the stop token is included in the output). Ties in
/// the argmax resolve to the lowest token id.
pub fn greedy(
    params: &Params,
    adapter: Option<&AdapterState>,
    prompt: &[usize],
    max_new: usize,
    stop: usize,
) -> Result<Vec<usize>> {
    decode(params, adapter, prompt, max_new, stop, |row| {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        Ok(best)
    })
}

/// Temperature sampling from softmax(logits/temperature), driven by the
/// caller's stream.
pub fn sample(
    params: &Params,
    adapter: Option<&AdapterState>,
    prompt: &[usize],
    max_new: usize,
    stop: usize,
    temperature: f64,
    stream: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if temperature <= 0.0 {
        return Err(CorvusError::generation("temperature must be positive"));
    }
    decode(params, adapter, prompt, max_new, stop, |row| {
        let scaled: Vec<f64> = row.iter().map(|&v| v / temperature).collect();
        let lse = logsumexp(&scaled);
        let u: f64 = rand::Rng::random(stream);
        let mut acc = 0.0;
        for (j, &z) in scaled.iter().enumerate() {
            acc += (z - lse).exp();
            if u < acc {
                return Ok(j);
            }
        }
        Ok(scaled.len() - 1)
    })
}

fn decode(
    params: &Params,
    adapter: Option<&AdapterState>,
    prompt: &[usize],
    max_new: usize,
    stop: usize,
    mut pick: impl FnMut(&[f64]) -> Result<usize>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(CorvusError::generation("empty prompt"));
    }
    let mut tokens = prompt.to_vec();
    let mut new = Vec::new();
    for _ in 0..max_new {
        if tokens.len() >= params.config.max_seq_len {
            break;
        }
        let trace = run_forward(params, adapter, &tokens)?;
        let last = trace.logits.row(trace.logits.rows - 1);
        let next = pick(last)?;
        tokens.push(next);
        new.push(next);
        if next == stop {
            break;
        }
    }
    Ok(new)
}

/// Convenience for tests and utility probes: sampled continuations under a
/// tagged stream.
pub fn sample_n(
    params: &Params,
    adapter: Option<&AdapterState>,
    prompt: &[usize],
    max_new: usize,
    stop: usize,
    temperature: f64,
    seed: u64,
    tag: &str,
    n: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut stream = rng::stream(seed, &format!("{tag}.{i}"));
        out.push(sample(params, adapter, prompt, max_new, stop, temperature, &mut stream)?);
    }
    Ok(out)
}
