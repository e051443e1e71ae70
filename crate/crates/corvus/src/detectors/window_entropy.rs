//! Worst-case local uncertainty: the maximum mean token entropy over
//! sliding sub-windows of the answer.

use std::ops::Range;

use crate::error::{CorvusError, Result};
use crate::linalg::Mat;
use crate::telemetry::token_entropy;

/// Max over length-`w` contiguous sub-windows of the mean per-position
/// entropy. With w = 1 this is the single most uncertain position.
pub fn window_entropy_score(logits: &Mat, window: &Range<usize>, w: usize) -> Result<f64> {
    if w == 0 {
        return Err(CorvusError::input("sub-window length must be positive"));
    }
    if w > window.len() {
        return Err(CorvusError::input(format!(
            "sub-window {w} longer than answer window {}",
            window.len()
        )));
    }
    let entropies: Vec<f64> = window
        .clone()
        .map(|t| token_entropy(logits, &(t..t + 1)))
        .collect::<Result<_>>()?;
    let mut best = f64::NEG_INFINITY;
    for start in 0..=(entropies.len() - w) {
        let mean = entropies[start..start + w].iter().sum::<f64>() / w as f64;
        if mean > best {
            best = mean;
        }
    }
    Ok(best)
}
