//! Perplexity of the realized answer under teacher forcing.

use std::ops::Range;

use crate::error::{CorvusError, Result};
use crate::linalg::Mat;
use crate::tape::Tape;

/// exp of the mean negative log-likelihood of the window tokens, each
/// scored by the logits row one step earlier.
pub fn ppl_score(logits: &Mat, tokens: &[usize], window: &Range<usize>) -> Result<f64> {
    if window.start == 0 {
        return Err(CorvusError::input("window starts at 0; no predecessor logits"));
    }
    if window.end > logits.rows || window.is_empty() {
        return Err(CorvusError::input("window out of range"));
    }
    let mut tape = Tape::new();
    let id = tape.leaf(logits.clone(), false);
    let ce = tape.cross_entropy_shifted(id, tokens, window.start, window.end);
    Ok(tape.scalar(ce).exp())
}
