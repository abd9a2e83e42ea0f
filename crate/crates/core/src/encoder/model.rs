//! Parameter layout of the encoder.
//!
//! The same tree shape holds either concrete tensors ([`EncoderModel`]) or
//! tape handles ([`BoundEncoder`]); [`Encoder::map`] converts between them
//! and [`Encoder::visit`] enumerates leaves in a fixed canonical order that
//! checkpoints, optimizers and audits all share.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

use super::config::{param_count, ModelConfig};

/// Half-width of the uniform initialization interval.
pub const INIT_RANGE: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    /// `[out x in]`
    pub weight: P,
    /// `[out]`
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<P> {
    pub gain: P,
    pub bias: P,
}

/// One post-LN Transformer layer. The query/key/value projections hold all
/// heads fused: rows `j * d_k .. (j + 1) * d_k` belong to head `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<P> {
    pub query: Linear<P>,
    pub key: Linear<P>,
    pub value: Linear<P>,
    pub output: Linear<P>,
    pub attention_norm: Norm<P>,
    /// `[E x d]`
    pub feed: Linear<P>,
    /// `[d x E]`
    pub forward: Linear<P>,
    pub ffn_norm: Norm<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<P> {
    pub config: ModelConfig,
    /// `[|W| x d]`, also the (tied) MLM output projection.
    pub word_embedding: P,
    /// `[|E| x d]`, learned.
    pub positional_embedding: P,
    pub embedding_norm: Norm<P>,
    pub layers: Vec<EncoderLayer<P>>,
    /// `[|W|]`; outside the architectural parameter count.
    pub lm_head_bias: P,
}

pub type EncoderModel = Encoder<Tensor>;
pub type BoundEncoder = Encoder<Var>;

type MapFn<'a, P, Q> = dyn FnMut(&str, &P) -> Q + 'a;

impl<P> Linear<P> {
    fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> Linear<Q> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl<P> Norm<P> {
    fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> Norm<Q> {
        Norm {
            gain: f(&format!("{prefix}.gain"), &self.gain),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

impl<P> EncoderLayer<P> {
    fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> EncoderLayer<Q> {
        EncoderLayer {
            query: self.query.map(&format!("{prefix}.attention.query"), f),
            key: self.key.map(&format!("{prefix}.attention.key"), f),
            value: self.value.map(&format!("{prefix}.attention.value"), f),
            output: self.output.map(&format!("{prefix}.attention.output"), f),
            attention_norm: self.attention_norm.map(&format!("{prefix}.attention_norm"), f),
            feed: self.feed.map(&format!("{prefix}.ffn.feed"), f),
            forward: self.forward.map(&format!("{prefix}.ffn.forward"), f),
            ffn_norm: self.ffn_norm.map(&format!("{prefix}.ffn_norm"), f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.query.visit(&format!("{prefix}.attention.query"), f);
        self.key.visit(&format!("{prefix}.attention.key"), f);
        self.value.visit(&format!("{prefix}.attention.value"), f);
        self.output.visit(&format!("{prefix}.attention.output"), f);
        self.attention_norm.visit(&format!("{prefix}.attention_norm"), f);
        self.feed.visit(&format!("{prefix}.ffn.feed"), f);
        self.forward.visit(&format!("{prefix}.ffn.forward"), f);
        self.ffn_norm.visit(&format!("{prefix}.ffn_norm"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.output.visit_mut(f);
        self.attention_norm.visit_mut(f);
        self.feed.visit_mut(f);
        self.forward.visit_mut(f);
        self.ffn_norm.visit_mut(f);
    }
}

impl<P> Encoder<P> {
    /// Rebuilds the tree with every leaf transformed by `f(name, leaf)`,
    /// visiting leaves in canonical order.
    pub fn map<Q>(&self, f: &mut MapFn<'_, P, Q>) -> Encoder<Q> {
        Encoder {
            config: self.config.clone(),
            word_embedding: f("embeddings.word", &self.word_embedding),
            positional_embedding: f("embeddings.position", &self.positional_embedding),
            embedding_norm: self.embedding_norm.map("embeddings.norm", f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, layer)| layer.map(&format!("layers.{i}"), f))
                .collect(),
            lm_head_bias: f("lm_head.bias", &self.lm_head_bias),
        }
    }

    /// Calls `f(name, leaf)` for every leaf in canonical order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        f("embeddings.word".into(), &self.word_embedding);
        f("embeddings.position".into(), &self.positional_embedding);
        self.embedding_norm.visit("embeddings.norm", f);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("layers.{i}"), f);
        }
        f("lm_head.bias".into(), &self.lm_head_bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        f(&mut self.word_embedding);
        f(&mut self.positional_embedding);
        self.embedding_norm.visit_mut(f);
        for layer in &mut self.layers {
            layer.visit_mut(f);
        }
        f(&mut self.lm_head_bias);
    }

    pub fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.visit(&mut |_, p| out.push(p));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| out.push(name));
        out
    }
}

/// Scalar counts of an instantiated model, obtained by walking its tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamAudit {
    /// Embeddings, layers and norms.
    pub architecture: u64,
    /// The MLM-head bias, reported separately.
    pub lm_head_extras: u64,
}

impl EncoderModel {
    /// Seeded initialization: weights and embeddings uniform in
    /// `[-INIT_RANGE, INIT_RANGE)`, biases zero, norms at gain 1 / bias 0.
    /// Tensors are filled in canonical order from one SplitMix64 stream.
    pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let skeleton = Self::zeros(config)?;
        Ok(skeleton.map(&mut |name, t: &Tensor| {
            if name.ends_with(".weight") || (name.starts_with("embeddings.") && !name.contains("norm")) {
                Tensor::uniform(t.shape(), -INIT_RANGE, INIT_RANGE, &mut rng)
            } else if name.ends_with(".gain") {
                Tensor::full(t.shape(), 1.0)
            } else {
                Tensor::zeros(t.shape())
            }
        }))
    }

    /// All-zero model of the given shape.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_size;
        let e = config.ffn_size;
        let linear = |out: usize, inp: usize| Linear {
            weight: Tensor::zeros(&[out, inp]),
            bias: Tensor::zeros(&[out]),
        };
        let norm = || Norm {
            gain: Tensor::zeros(&[d]),
            bias: Tensor::zeros(&[d]),
        };
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer {
                query: linear(d, d),
                key: linear(d, d),
                value: linear(d, d),
                output: linear(d, d),
                attention_norm: norm(),
                feed: linear(e, d),
                forward: linear(d, e),
                ffn_norm: norm(),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            word_embedding: Tensor::zeros(&[config.vocab_size, d]),
            positional_embedding: Tensor::zeros(&[config.max_positions, d]),
            embedding_norm: norm(),
            layers,
            lm_head_bias: Tensor::zeros(&[config.vocab_size]),
        })
    }

    pub fn audit(&self) -> ParamAudit {
        let mut architecture = 0u64;
        let mut lm_head_extras = 0u64;
        self.visit(&mut |name, t| {
            if name.starts_with("lm_head.") {
                lm_head_extras += t.len() as u64;
            } else {
                architecture += t.len() as u64;
            }
        });
        ParamAudit {
            architecture,
            lm_head_extras,
        }
    }

    /// Checks that the audited count agrees with the closed-form count and
    /// that every tensor has the shape the config implies.
    pub fn verify_layout(&self) -> Result<()> {
        let reference = Self::zeros(&self.config)?;
        let ours = self.leaves();
        let theirs = reference.leaves();
        if ours.len() != theirs.len() {
            return Err(Error::Config(format!(
                "model has {} tensors, config implies {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((name, a), b) in self.names().iter().zip(&ours).zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "{name}: shape {:?}, config implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        let audit = self.audit();
        let expected = param_count(&self.config);
        if audit.architecture != expected {
            return Err(Error::Config(format!(
                "audited count {} differs from formula {expected}",
                audit.architecture
            )));
        }
        Ok(())
    }

    /// Registers every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundEncoder {
        self.map(&mut |_, t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Adds the tape gradients of a bound copy into this model's gradient
    /// buffers. Leaves that `backward` never reached contribute zeros.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundEncoder) {
        let vars: Vec<Var> = bound.leaves().into_iter().copied().collect();
        let mut i = 0;
        self.visit_mut(&mut |t| {
            let v = vars[i];
            i += 1;
            match tape.grad(v) {
                Some(g) => t.accumulate_grad(g),
                None => {
                    t.grad_mut();
                }
            }
        });
    }

    pub fn zero_grads(&mut self) {
        self.visit_mut(&mut |t| t.zero_grad());
    }

    pub fn clear_grads(&mut self) {
        self.visit_mut(&mut |t| t.clear_grad());
    }

    /// Bitwise equality of all parameters.
    pub fn bit_eq(&self, other: &EncoderModel) -> bool {
        self.config == other.config
            && self
                .leaves()
                .iter()
                .zip(other.leaves())
                .all(|(a, b)| a.bit_eq(b))
    }
}
