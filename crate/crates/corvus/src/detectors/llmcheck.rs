//! Single-layer geometry scores: hidden-state log-volume per dimension and
//! attention diagonal mass, each at a layer picked on validation data.

use std::ops::Range;

use crate::error::{CorvusError, Result};
use crate::model::forward::ForwardTrace;
use crate::telemetry::{attention_diagonality, hidden_log_volume};

/// Log-volume of the window's hidden states at `layer` (1-based), divided
/// by the model width so the score is a mean log-eigenvalue.
pub fn hidden_score(
    trace: &ForwardTrace,
    window: &Range<usize>,
    layer: usize,
    eta: f64,
) -> Result<f64> {
    let depth = trace.hidden.len() - 1;
    if layer == 0 || layer > depth {
        return Err(CorvusError::input(format!("layer {layer} outside 1..={depth}")));
    }
    let h = &trace.hidden[layer];
    Ok(hidden_log_volume(h, window, eta)? / h.cols as f64)
}

/// Mean log attention self-mass at `layer` (1-based).
pub fn attention_score(
    trace: &ForwardTrace,
    window: &Range<usize>,
    layer: usize,
    delta: f64,
) -> Result<f64> {
    let depth = trace.attn.len();
    if layer == 0 || layer > depth {
        return Err(CorvusError::input(format!("layer {layer} outside 1..={depth}")));
    }
    attention_diagonality(&trace.attn[layer - 1], window, delta)
}
