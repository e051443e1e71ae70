//! Model shape description.

use crate::error::{CorvusError, Result};
use serde::{Deserialize, Serialize};

/// Shape of the decoder-only transformer. All sizes are in elements, not
/// bytes; `max_seq_len` bounds the learned position table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Desk-scale default: small enough to train on a laptop CPU while
    /// keeping multiple heads and layers worth probing.
    pub fn desk_scale() -> Self {
        ModelConfig { vocab_size: 512, d_model: 64, n_layers: 4, n_heads: 4, max_seq_len: 64 }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(CorvusError::input("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CorvusError::input(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(CorvusError::input("max_seq_len must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_scale_is_valid() {
        assert!(ModelConfig::desk_scale().validate().is_ok());
    }

    #[test]
    fn rejects_ragged_heads() {
        let mut c = ModelConfig::desk_scale();
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }
}
