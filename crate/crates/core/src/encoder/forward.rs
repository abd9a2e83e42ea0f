//! Forward pass of the encoder on a tape.
//!
//! Hidden states are `d x N` matrices: one column per token. A batch packs
//! the columns of several sequences side by side; every op except attention
//! is column-local, and attention is evaluated per [`Segment`], so padding
//! never enters the computation.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::POSITION_OFFSET;
use super::model::{BoundEncoder, EncoderLayer, EncoderModel, Linear};

/// Column range of one sequence inside a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Segments for consecutive sequences of the given lengths.
pub fn segments_for(lengths: &[usize]) -> Vec<Segment> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&len| {
            let seg = Segment { start, len };
            start += len;
            seg
        })
        .collect()
}

/// Tape handles produced by [`encode_batch`].
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// `d x N` final hidden states.
    pub hidden: Var,
    /// `|W| x N` log-probabilities of the MLM head.
    pub log_probs: Var,
    pub segments: Vec<Segment>,
}

/// Concrete outputs for a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `d x n`
    pub hidden: Tensor,
    /// `|W| x n`
    pub log_probs: Tensor,
}

/// `W x + b` applied to every column.
pub fn linear(tape: &mut Tape, layer: &Linear<Var>, x: Var) -> Result<Var> {
    let y = tape.matmul(layer.weight, x)?;
    tape.add_col_bias(y, layer.bias)
}

/// One attention head over one segment, given the already projected
/// queries, keys and values (`d x N` each). Returns the head output
/// (`d_k x n`) and the attention weights (`n_keys x n_queries`, each column
/// a distribution over keys).
fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    head: usize,
    head_size: usize,
) -> Result<(Var, Var)> {
    let rows = head * head_size;
    let qj = tape.slice_rows(q, rows, head_size)?;
    let kj = tape.slice_rows(k, rows, head_size)?;
    let vj = tape.slice_rows(v, rows, head_size)?;
    let kt = tape.transpose(kj)?;
    let scores = tape.matmul(kt, qj)?;
    let scaled = tape.scale(scores, 1.0 / (head_size as f32).sqrt())?;
    let weights = tape.softmax_columns(scaled)?;
    let out = tape.matmul(vj, weights)?;
    Ok((out, weights))
}

fn check_nonempty(tape: &Tape, h: Var) -> Result<()> {
    match tape.shape(h) {
        [_, n] if *n > 0 => Ok(()),
        _ => Err(Error::EmptyInput("attention")),
    }
}

/// `Head_j(H) = V_j softmax(Q_j^T K_j / sqrt(d_k))^T` for one sequence
/// `h` (`d x n`). Also returns the attention weights.
pub fn head_attention(
    tape: &mut Tape,
    enc: &BoundEncoder,
    layer: usize,
    head: usize,
    h: Var,
) -> Result<(Var, Var)> {
    check_nonempty(tape, h)?;
    let cfg = &enc.config;
    if head >= cfg.num_heads {
        return Err(Error::Config(format!(
            "head {head} out of range for {} heads",
            cfg.num_heads
        )));
    }
    let params = layer_params(enc, layer)?;
    let q = linear(tape, &params.query, h)?;
    let k = linear(tape, &params.key, h)?;
    let v = linear(tape, &params.value, h)?;
    attend(tape, q, k, v, head, cfg.head_size())
}

fn layer_params(enc: &BoundEncoder, layer: usize) -> Result<&EncoderLayer<Var>> {
    enc.layers.get(layer).ok_or_else(|| {
        Error::Config(format!(
            "layer {layer} out of range for {} layers",
            enc.layers.len()
        ))
    })
}

/// Multi-head attention of one layer over packed sequences: heads
/// concatenated row-wise per segment, then mixed by `W_out`.
pub fn multi_head(
    tape: &mut Tape,
    enc: &BoundEncoder,
    layer: usize,
    h: Var,
    segments: &[Segment],
) -> Result<Var> {
    Ok(multi_head_traced(tape, enc, layer, h, segments)?.0)
}

/// As [`multi_head`], also returning the attention weights per segment and
/// head (`weights[segment][head]`).
pub fn multi_head_traced(
    tape: &mut Tape,
    enc: &BoundEncoder,
    layer: usize,
    h: Var,
    segments: &[Segment],
) -> Result<(Var, Vec<Vec<Var>>)> {
    check_nonempty(tape, h)?;
    if segments.is_empty() {
        return Err(Error::EmptyInput("multi_head"));
    }
    let cfg = &enc.config;
    let params = layer_params(enc, layer)?;
    let q = linear(tape, &params.query, h)?;
    let k = linear(tape, &params.key, h)?;
    let v = linear(tape, &params.value, h)?;
    let single = segments.len() == 1;
    let mut per_segment = Vec::with_capacity(segments.len());
    let mut weights = Vec::with_capacity(segments.len());
    for seg in segments {
        let (qs, ks, vs) = if single {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, seg.start, seg.len)?,
                tape.slice_cols(k, seg.start, seg.len)?,
                tape.slice_cols(v, seg.start, seg.len)?,
            )
        };
        let mut heads = Vec::with_capacity(cfg.num_heads);
        let mut seg_weights = Vec::with_capacity(cfg.num_heads);
        for j in 0..cfg.num_heads {
            let (out, w) = attend(tape, qs, ks, vs, j, cfg.head_size())?;
            heads.push(out);
            seg_weights.push(w);
        }
        per_segment.push(if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_rows(&heads)?
        });
        weights.push(seg_weights);
    }
    let concat = if single {
        per_segment[0]
    } else {
        tape.concat_cols(&per_segment)?
    };
    Ok((linear(tape, &params.output, concat)?, weights))
}

/// `W_forward ReLU(W_feed H + b_feed) + b_forward`.
pub fn feed_forward(tape: &mut Tape, enc: &BoundEncoder, layer: usize, h: Var) -> Result<Var> {
    let params = layer_params(enc, layer)?;
    let inner = linear(tape, &params.feed, h)?;
    let act = tape.relu(inner)?;
    linear(tape, &params.forward, act)
}

/// One post-LN layer: `H <- LN(H + MultiHead(H))`, `H <- LN(H + FF(H))`.
pub fn transformer_layer(
    tape: &mut Tape,
    enc: &BoundEncoder,
    layer: usize,
    h: Var,
    segments: &[Segment],
) -> Result<Var> {
    let eps = enc.config.layer_norm_eps;
    let params = layer_params(enc, layer)?;
    let attn = multi_head(tape, enc, layer, h, segments)?;
    let res = tape.add(h, attn)?;
    let h = tape.layer_norm(res, params.attention_norm.gain, params.attention_norm.bias, eps)?;
    let ff = feed_forward(tape, enc, layer, h)?;
    let res = tape.add(h, ff)?;
    tape.layer_norm(res, params.ffn_norm.gain, params.ffn_norm.bias, eps)
}

fn check_sequences(enc: &BoundEncoder, sequences: &[&[u32]]) -> Result<()> {
    let cfg = &enc.config;
    if sequences.is_empty() {
        return Err(Error::EmptyInput("encode"));
    }
    for seq in sequences {
        if seq.is_empty() {
            return Err(Error::EmptyInput("encode"));
        }
        if seq.len() > cfg.max_sequence_len() {
            return Err(Error::Length {
                len: seq.len(),
                max: cfg.max_sequence_len(),
            });
        }
        if let Some(&id) = seq.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
    }
    Ok(())
}

/// `H_0 = LN(word[ids] + pos[positions])` for packed sequences.
pub fn embed(tape: &mut Tape, enc: &BoundEncoder, sequences: &[&[u32]]) -> Result<Var> {
    check_sequences(enc, sequences)?;
    let ids: Vec<u32> = sequences.iter().flat_map(|s| s.iter().copied()).collect();
    let positions: Vec<u32> = sequences
        .iter()
        .flat_map(|s| (0..s.len()).map(|p| (p + POSITION_OFFSET) as u32))
        .collect();
    let words = tape.embedding(enc.word_embedding, &ids)?;
    let pos = tape.embedding(enc.positional_embedding, &positions)?;
    let sum = tape.add(words, pos)?;
    tape.layer_norm(
        sum,
        enc.embedding_norm.gain,
        enc.embedding_norm.bias,
        enc.config.layer_norm_eps,
    )
}

/// Full encoder over a batch of sequences, packed column-wise.
pub fn encode_batch(
    tape: &mut Tape,
    enc: &BoundEncoder,
    sequences: &[&[u32]],
) -> Result<EncodedBatch> {
    let mut h = embed(tape, enc, sequences)?;
    let lengths: Vec<usize> = sequences.iter().map(|s| s.len()).collect();
    let segments = segments_for(&lengths);
    for layer in 0..enc.layers.len() {
        h = transformer_layer(tape, enc, layer, h, &segments)?;
    }
    let log_probs = mlm_head(tape, enc, h)?;
    Ok(EncodedBatch {
        hidden: h,
        log_probs,
        segments,
    })
}

/// `log_softmax(word_embedding H + lm_head_bias)` column-wise.
pub fn mlm_head(tape: &mut Tape, enc: &BoundEncoder, hidden: Var) -> Result<Var> {
    let logits = tape.matmul(enc.word_embedding, hidden)?;
    let logits = tape.add_col_bias(logits, enc.lm_head_bias)?;
    tape.log_softmax_columns(logits)
}

/// Inference on one sequence with a private tape.
pub fn encode(model: &EncoderModel, token_ids: &[u32]) -> Result<EncoderOutput> {
    let mut tape = Tape::new();
    let enc = model.bind(&mut tape, false);
    let out = encode_batch(&mut tape, &enc, &[token_ids])?;
    Ok(EncoderOutput {
        hidden: tape.value(out.hidden).clone(),
        log_probs: tape.value(out.log_probs).clone(),
    })
}

/// Inference on a batch; returns the packed `d x N` and `|W| x N` outputs.
pub fn encode_many(model: &EncoderModel, sequences: &[&[u32]]) -> Result<(EncoderOutput, Vec<Segment>)> {
    let mut tape = Tape::new();
    let enc = model.bind(&mut tape, false);
    let out = encode_batch(&mut tape, &enc, sequences)?;
    Ok((
        EncoderOutput {
            hidden: tape.value(out.hidden).clone(),
            log_probs: tape.value(out.log_probs).clone(),
        },
        out.segments,
    ))
}
