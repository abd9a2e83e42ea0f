use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positional rows below this index are reserved and never looked up,
/// following the RoBERTa convention (`514 = 512 + 2`).
pub const POSITION_OFFSET: usize = 2;

pub const DEFAULT_LAYER_NORM_EPS: f32 = 1e-5;

fn default_eps() -> f32 {
    DEFAULT_LAYER_NORM_EPS
}

/// Architecture of an encoder: layer count, hidden size, head count,
/// feed-forward size, vocabulary size and positional table size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f32,
}

impl ModelConfig {
    /// CamemBERT-base shape.
    pub fn camembert_base() -> Self {
        Self {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            ffn_size: 3072,
            vocab_size: 32_005,
            max_positions: 514,
            layer_norm_eps: DEFAULT_LAYER_NORM_EPS,
        }
    }

    /// DistilCamemBERT-base shape: half the layers of CamemBERT-base.
    pub fn distilcamembert_base() -> Self {
        Self {
            num_layers: 6,
            ..Self::camembert_base()
        }
    }

    pub fn with_layers(&self, num_layers: usize) -> Self {
        Self {
            num_layers,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.max_positions <= POSITION_OFFSET {
            return Err(Error::Config(format!(
                "max_positions must exceed the {POSITION_OFFSET} reserved rows, got {}",
                self.max_positions
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config(format!(
                "layer_norm_eps must be positive, got {}",
                self.layer_norm_eps
            )));
        }
        Ok(())
    }

    pub fn head_size(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Longest sequence (including the leading `<s>`) the positional table
    /// can address.
    pub fn max_sequence_len(&self) -> usize {
        self.max_positions.saturating_sub(POSITION_OFFSET)
    }

    /// Trainable scalars per layer: four attention projections with biases,
    /// the two feed-forward projections with biases, and two layer norms.
    pub fn params_per_layer(&self) -> u64 {
        let d = self.hidden_size as u64;
        let e = self.ffn_size as u64;
        4 * d * d + 2 * d * e + 9 * d + e
    }

    /// Word and positional tables plus the embedding layer norm.
    pub fn embedding_params(&self) -> u64 {
        let d = self.hidden_size as u64;
        d * (self.vocab_size as u64 + self.max_positions as u64 + 2)
    }
}

/// `L (4 d^2 + 2 d E + 9 d + E) + d (|W| + |E| + 2)`; the MLM-head bias and
/// any pooling layer are not part of the count.
pub fn param_count(config: &ModelConfig) -> u64 {
    config.num_layers as u64 * config.params_per_layer() + config.embedding_params()
}
