//! Fixtures shared by the benchmarks.

use distil_core::corpus::{BOS, NUM_SPECIAL};
use distil_core::{EncoderModel, ModelConfig, SplitMix64};

/// The desk-scale shape used for speed comparisons: `d = 64`, four heads,
/// `E = 256`, twelve layers.
pub fn desk_config(layers: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_size: 64,
        num_heads: 4,
        ffn_size: 256,
        vocab_size: 208,
        max_positions: 130,
        layer_norm_eps: 1e-5,
    }
}

pub fn desk_model(layers: usize) -> EncoderModel {
    EncoderModel::init_random(&desk_config(layers), layers as u64).expect("desk config is valid")
}

/// `batch` random sequences of `len` tokens, each starting with `<s>`.
pub fn random_batch(vocab: usize, len: usize, batch: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = SplitMix64::new(seed);
    (0..batch)
        .map(|_| {
            std::iter::once(BOS)
                .chain((1..len).map(|_| NUM_SPECIAL + rng.below((vocab as u32 - NUM_SPECIAL) as u64) as u32))
                .collect()
        })
        .collect()
}
