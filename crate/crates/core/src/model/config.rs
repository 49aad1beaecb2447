use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Defaults reproduce the reference model:
/// 2048-d inputs, 512-d embeddings, 3 encoder layers with 8 heads, dropout 0.1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    /// Length of the positional-encoding table, i.e. the longest accepted sequence.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 2048,
            d_model: 512,
            num_layers: 3,
            num_heads: 8,
            ffn_dim: 2048,
            dropout_rate: 0.1,
            num_classes: 2,
            max_len: 512,
        }
    }
}

impl ModelConfig {
    /// Config with `ffn_dim = 4 * d_model`.
    pub fn new(input_dim: usize, d_model: usize, num_layers: usize, num_heads: usize) -> Self {
        ModelConfig { input_dim, d_model, num_layers, num_heads, ffn_dim: 4 * d_model, ..ModelConfig::default() }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.input_dim == 0 || self.d_model == 0 || self.ffn_dim == 0 || self.max_len == 0 {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad(format!("d_model {} must be divisible by num_heads {}", self.d_model, self.num_heads));
        }
        if self.num_classes != 2 {
            return bad(format!("num_classes must be 2, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }
}
