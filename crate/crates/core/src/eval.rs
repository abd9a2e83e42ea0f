//! Token-overlap F1, zero-shot composition, masked-LM metrics and the
//! teacher/student forward-pass benchmark.

use std::collections::HashMap;
use std::hash::Hash;
use std::time::Instant;

use serde::Serialize;

use crate::corpus::{MaskedBatch, BOS, NUM_SPECIAL};
use crate::encoder::{encode_many, EncoderModel, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Score {
    /// Scores from overlap counts. Two empty sides agree perfectly; one
    /// empty side scores 0.
    pub fn from_counts(overlap: usize, predicted: usize, gold: usize) -> Self {
        if predicted == 0 && gold == 0 {
            return Self {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(overlap, predicted);
        let recall = ratio(overlap, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct F1Report {
    pub per_example: Vec<F1Score>,
    /// Pooled over all examples' overlap and size counts.
    pub micro: F1Score,
}

fn multiset_overlap<T: Eq + Hash>(predicted: &[T], gold: &[T]) -> usize {
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    predicted
        .iter()
        .filter(|t| match counts.get_mut(t) {
            Some(c) if *c > 0 => {
                *c -= 1;
                true
            }
            _ => false,
        })
        .count()
}

/// Precision/recall/F1 over the multiset intersection of two token lists.
pub fn token_f1<T: Eq + Hash>(predicted: &[T], gold: &[T]) -> F1Score {
    F1Score::from_counts(multiset_overlap(predicted, gold), predicted.len(), gold.len())
}

/// Per-example scores and their micro-average.
pub fn f1_report<T: Eq + Hash>(pairs: &[(Vec<T>, Vec<T>)]) -> F1Report {
    let (mut overlap, mut predicted, mut gold) = (0, 0, 0);
    let per_example = pairs
        .iter()
        .map(|(p, g)| {
            let o = multiset_overlap(p, g);
            overlap += o;
            predicted += p.len();
            gold += g.len();
            F1Score::from_counts(o, p.len(), g.len())
        })
        .collect();
    F1Report {
        per_example,
        micro: F1Score::from_counts(overlap, predicted, gold),
    }
}

/// Softmax over per-class entailment scores, preserving input order.
pub fn zero_shot_classify<S: AsRef<str>>(scores: &[(S, f64)]) -> Result<Vec<(String, f64)>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("zero_shot_classify"));
    }
    if let Some((name, s)) = scores.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::DegenerateInput {
            op: "zero_shot_classify",
            reason: format!("score of {} is {s}", name.as_ref()),
        });
    }
    let max = scores.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|(_, s)| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(scores
        .iter()
        .zip(exps)
        .map(|((name, _), e)| (name.as_ref().to_owned(), e / z))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MlmMetrics {
    /// Top-1 accuracy at masked positions.
    pub accuracy: f64,
    /// `exp` of the mean masked negative log-likelihood.
    pub perplexity: f64,
    pub mean_nll: f64,
    pub masked_count: usize,
}

/// Masked-token accuracy and perplexity over `batches`.
pub fn mlm_eval(model: &EncoderModel, batches: &[MaskedBatch]) -> Result<MlmMetrics> {
    let (mut correct, mut count, mut nll) = (0usize, 0usize, 0.0f64);
    for batch in batches {
        if batch.masked_count() == 0 {
            continue;
        }
        let (out, _) = encode_many(model, &batch.sequences())?;
        let log_probs = &out.log_probs;
        for (id, col) in batch.targets() {
            let column = log_probs.column(col);
            let best = column
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            correct += usize::from(best == id);
            nll -= column[id] as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mean_nll = nll / count as f64;
    Ok(MlmMetrics {
        accuracy: correct as f64 / count as f64,
        perplexity: mean_nll.exp(),
        mean_nll,
        masked_count: count,
    })
}

/// Mean per-token divergence and alignment between two models on `batches`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignmentMetrics {
    /// Mean over tokens of `D_KL(p_student || p_teacher)`.
    pub soft_label_kl: f64,
    /// Mean over tokens of `cos(h_student, h_teacher)`.
    pub cosine_similarity: f64,
    pub token_count: usize,
}

pub fn alignment(
    student: &EncoderModel,
    teacher: &EncoderModel,
    batches: &[MaskedBatch],
) -> Result<AlignmentMetrics> {
    let (mut kl, mut cos, mut tokens) = (0.0f64, 0.0f64, 0usize);
    for batch in batches {
        let seqs = batch.sequences();
        let (s, _) = encode_many(student, &seqs)?;
        let (t, _) = encode_many(teacher, &seqs)?;
        for col in 0..s.hidden.cols() {
            let (ls, lt) = (s.log_probs.column(col), t.log_probs.column(col));
            kl += ls
                .iter()
                .zip(&lt)
                .map(|(&a, &b)| (a as f64).exp() * (a as f64 - b as f64))
                .sum::<f64>();
            let (hs, ht) = (s.hidden.column(col), t.hidden.column(col));
            let dot: f64 = hs.iter().zip(&ht).map(|(&a, &b)| a as f64 * b as f64).sum();
            let ns: f64 = hs.iter().map(|&a| a as f64 * a as f64).sum::<f64>().sqrt();
            let nt: f64 = ht.iter().map(|&a| a as f64 * a as f64).sum::<f64>().sqrt();
            if ns == 0.0 || nt == 0.0 {
                return Err(Error::DegenerateInput {
                    op: "alignment",
                    reason: format!("zero hidden vector at column {col}"),
                });
            }
            cos += dot / (ns * nt);
            tokens += 1;
        }
    }
    if tokens == 0 {
        return Err(Error::EmptyInput("alignment"));
    }
    Ok(AlignmentMetrics {
        soft_label_kl: kl / tokens as f64,
        cosine_similarity: cos / tokens as f64,
        token_count: tokens,
    })
}

/// Floating-point operations of the Transformer layer stack for `batch`
/// sequences of `seq_len` tokens, counting a multiply-add as 2: the four
/// `d x d` projections, the score and weighted-sum products, and the two
/// feed-forward products. Embeddings and the MLM head are excluded.
pub fn layer_stack_flops(config: &ModelConfig, seq_len: usize, batch: usize) -> u64 {
    let (n, d, e) = (seq_len as u64, config.hidden_size as u64, config.ffn_size as u64);
    let per_layer = 2 * 4 * n * d * d + 2 * 2 * n * n * d + 2 * 2 * n * d * e;
    config.num_layers as u64 * per_layer * batch as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub mean_seconds: f64,
    pub median_seconds: f64,
}

impl Timing {
    fn from_samples(samples: &mut [f64]) -> Self {
        samples.sort_by(f64::total_cmp);
        let n = samples.len();
        let median = if n % 2 == 1 {
            samples[n / 2]
        } else {
            0.5 * (samples[n / 2 - 1] + samples[n / 2])
        };
        Self {
            mean_seconds: samples.iter().sum::<f64>() / n as f64,
            median_seconds: median,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub seq_len: usize,
    pub batch: usize,
    pub iters: usize,
    pub teacher: Timing,
    pub student: Timing,
    /// Teacher median over student median.
    pub speedup: f64,
    pub teacher_flops: u64,
    pub student_flops: u64,
    pub flop_ratio: f64,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchOptions {
    pub seq_len: usize,
    pub batch: usize,
    pub iters: usize,
    /// Untimed passes before measuring.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            seq_len: 128,
            batch: 8,
            iters: 10,
            warmup: 2,
            seed: 0,
        }
    }
}

pub const MIN_BENCH_ITERS: usize = 10;

/// Analytic FLOP comparison of two shapes, with a warning when the ratio
/// does not isolate depth.
pub fn flop_comparison(teacher: &ModelConfig, student: &ModelConfig, seq_len: usize, batch: usize) -> (u64, u64, f64, Option<String>) {
    let tf = layer_stack_flops(teacher, seq_len, batch);
    let sf = layer_stack_flops(student, seq_len, batch);
    let warning = (teacher.hidden_size != student.hidden_size).then(|| {
        format!(
            "hidden sizes differ ({} vs {}); the ratio does not isolate layer count",
            teacher.hidden_size, student.hidden_size
        )
    });
    (tf, sf, tf as f64 / sf as f64, warning)
}

/// Single-threaded forward-pass wall time of both models on the same
/// random inputs, alternating teacher and student runs.
pub fn bench(teacher: &EncoderModel, student: &EncoderModel, options: &BenchOptions) -> Result<BenchReport> {
    if options.iters < MIN_BENCH_ITERS {
        return Err(Error::Config(format!(
            "bench needs at least {MIN_BENCH_ITERS} iterations, got {}",
            options.iters
        )));
    }
    if options.batch == 0 || options.seq_len == 0 {
        return Err(Error::Config("bench needs a positive batch and sequence length".into()));
    }
    let vocab = teacher.config.vocab_size.min(student.config.vocab_size) as u64;
    let mut rng = SplitMix64::new(options.seed);
    let inputs: Vec<Vec<u32>> = (0..options.batch)
        .map(|_| {
            std::iter::once(BOS)
                .chain((1..options.seq_len).map(|_| {
                    if vocab > NUM_SPECIAL as u64 {
                        NUM_SPECIAL + rng.below(vocab - NUM_SPECIAL as u64) as u32
                    } else {
                        rng.below(vocab) as u32
                    }
                }))
                .collect()
        })
        .collect();
    let seqs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
    let time = |model: &EncoderModel| -> Result<f64> {
        let start = Instant::now();
        let out = encode_many(model, &seqs)?;
        std::hint::black_box(out);
        Ok(start.elapsed().as_secs_f64())
    };
    for _ in 0..options.warmup {
        time(teacher)?;
        time(student)?;
    }
    let mut t_samples = Vec::with_capacity(options.iters);
    let mut s_samples = Vec::with_capacity(options.iters);
    for _ in 0..options.iters {
        t_samples.push(time(teacher)?);
        s_samples.push(time(student)?);
    }
    let teacher_t = Timing::from_samples(&mut t_samples);
    let student_t = Timing::from_samples(&mut s_samples);
    let (tf, sf, ratio, warning) = flop_comparison(&teacher.config, &student.config, options.seq_len, options.batch);
    Ok(BenchReport {
        seq_len: options.seq_len,
        batch: options.batch,
        iters: options.iters,
        teacher: teacher_t,
        student: student_t,
        speedup: teacher_t.median_seconds / student_t.median_seconds,
        teacher_flops: tf,
        student_flops: sf,
        flop_ratio: ratio,
        warning,
    })
}
