//! Embedding-space attack that the adapter must survive.
//!
//! The attack surrogate is φ = −Σ_{ℓ∈band} AD_ℓ (a sum, not a mean), so
//! ascending φ pushes attention off the diagonal. One signed-gradient step
//! in embedding space:
//!
//!   E' = E + ε · sign(∇_E φ),  sign(0) = 0, no clamping.
//!
//! E' re-enters the forward pass as a constant: no gradient flows back
//! through the attack construction.

use std::ops::Range;

use crate::error::Result;
use crate::linalg::Mat;
use crate::model::forward::TraceNodes;
use crate::tape::{NodeId, Tape};
use crate::telemetry::{ad_node, AD_DELTA};

/// Attack surrogate node: φ = −Σ AD_ℓ over the band.
pub fn surrogate_node(
    tape: &mut Tape,
    trace: &TraceNodes,
    band: &[usize],
    window: &Range<usize>,
) -> Result<NodeId> {
    let mut parts = Vec::with_capacity(band.len());
    for &l in band {
        let ad = ad_node(tape, trace, l, window, AD_DELTA)?;
        parts.push((ad, -1.0));
    }
    Ok(tape.lin_comb(&parts))
}

/// Signed-gradient step. Zero gradient entries stay untouched.
pub fn fgsm_step(e: &Mat, grad: &Mat, epsilon: f64) -> Mat {
    assert_eq!((e.rows, e.cols), (grad.rows, grad.cols));
    let mut out = e.clone();
    for (o, &g) in out.data.iter_mut().zip(&grad.data) {
        if g > 0.0 {
            *o += epsilon;
        } else if g < 0.0 {
            *o -= epsilon;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_semantics() {
        let e = Mat::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let g = Mat::from_vec(1, 4, vec![0.5, -0.1, 0.0, -0.0]);
        let out = fgsm_step(&e, &g, 0.25);
        assert_eq!(out.data, vec![1.25, 1.75, 3.0, 4.0]);
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let e = Mat::from_vec(2, 2, vec![1.0, -2.0, 0.5, 0.0]);
        let g = Mat::from_vec(2, 2, vec![1.0, 1.0, -1.0, 1.0]);
        assert_eq!(fgsm_step(&e, &g, 0.0), e);
    }

    #[test]
    fn no_clamping_applied() {
        let e = Mat::from_vec(1, 2, vec![1e6, -1e6]);
        let g = Mat::from_vec(1, 2, vec![1.0, -1.0]);
        let out = fgsm_step(&e, &g, 10.0);
        assert_eq!(out.data, vec![1e6 + 10.0, -1e6 - 10.0]);
    }
}
