//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use crate::linalg::Mat;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Peak·½(1+cos(π·s/S)) — no warmup, decays to zero at the final update.
pub fn cosine_lr(peak: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return peak;
    }
    let s = (step.min(total_steps)) as f64 / total_steps as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())
}

/// Moment state is positional: call `step` with tensors and gradients in
/// the same order every time.
#[derive(Debug)]
pub struct AdamW {
    weight_decay: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: usize,
}

impl AdamW {
    pub fn new(shapes: &[(usize, usize)], weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            m: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            t: 0,
        }
    }

    pub fn for_tensors(tensors: &[&Mat], weight_decay: f64) -> Self {
        let shapes: Vec<(usize, usize)> = tensors.iter().map(|m| (m.rows, m.cols)).collect();
        Self::new(&shapes, weight_decay)
    }

    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!((p.rows, p.cols), (g.rows, g.cols));
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
                v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                // decoupled decay: applied to the parameter, not the gradient
                p.data[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + self.weight_decay * p.data[i]);
            }
        }
    }
}
