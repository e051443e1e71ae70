//! Adapter-training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{CorvusError, Result};

/// Coefficients and schedule for the camouflage objective
///
///   total = CE + βte·TE − βhv·HV̄ − λ·AD̄_attacked
///
/// where CE, TE, HV̄ come from the clean pass and AD̄_attacked from the
/// perturbed-embedding pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorvusConfig {
    pub beta_te: f64,
    pub beta_hv: f64,
    pub lambda_adv: f64,
    /// Embedding attack step size; 0 disables the perturbation.
    pub epsilon: f64,
    pub learning_rate: f64,
    pub grad_accum: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Fractional layer band whose telemetry enters the objective.
    pub band_lo: f64,
    pub band_hi: f64,
    pub seed: u64,
}

impl Default for CorvusConfig {
    fn default() -> Self {
        CorvusConfig {
            beta_te: 0.07,
            beta_hv: 0.05,
            lambda_adv: 0.5,
            epsilon: 1e-2,
            learning_rate: 2e-4,
            grad_accum: 4,
            weight_decay: 0.0,
            epochs: 1,
            band_lo: 0.5,
            band_hi: 0.75,
            seed: 23,
        }
    }
}

impl CorvusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(CorvusError::input("epsilon must be nonnegative"));
        }
        if self.learning_rate <= 0.0 {
            return Err(CorvusError::input("learning rate must be positive"));
        }
        if self.grad_accum == 0 || self.epochs == 0 {
            return Err(CorvusError::input("grad_accum and epochs must be positive"));
        }
        if self.beta_te < 0.0 || self.beta_hv < 0.0 || self.lambda_adv < 0.0 {
            return Err(CorvusError::input("loss coefficients must be nonnegative"));
        }
        Ok(())
    }
}
