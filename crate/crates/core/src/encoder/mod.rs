//! Post-LN Transformer encoder with learned positions and a tied MLM head.

mod config;
mod forward;
mod model;

pub use config::{param_count, ModelConfig, DEFAULT_LAYER_NORM_EPS, POSITION_OFFSET};
pub use forward::{
    embed, encode, encode_batch, encode_many, feed_forward, head_attention, linear, mlm_head,
    multi_head, multi_head_traced, segments_for, transformer_layer, EncodedBatch, EncoderOutput,
    Segment,
};
pub use model::{
    BoundEncoder, Encoder, EncoderLayer, EncoderModel, Linear, Norm, ParamAudit, INIT_RANGE,
};
