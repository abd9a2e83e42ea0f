//! Transformer encoder and knowledge-distillation engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: a tape-based reverse-mode engine over [`Tensor`]s.
//! - [`encoder`]: the post-LN Transformer encoder with a tied MLM head.
//! - [`distill`]: student construction and the three-part distillation
//!   objective.
//! - [`corpus`]: toy tokenizer, vocabulary, MLM masking and batching.
//! - [`train`]: optimizer, training loops, checkpoints and loss logs.
//! - [`eval`]: token-overlap F1, zero-shot composition, MLM metrics and the
//!   teacher/student speed benchmark.

pub mod autodiff;
pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{KlDirection, Tape, Var};
pub use corpus::{MaskedBatch, Vocabulary};
pub use distill::{DistillConfig, LossBreakdown};
pub use encoder::{encode, param_count, EncoderModel, ModelConfig};
pub use error::{Error, Result};
pub use rng::SplitMix64;
pub use tensor::Tensor;
pub use train::RunConfig;
