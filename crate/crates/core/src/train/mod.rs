//! Optimization loops for teacher pretraining and student distillation,
//! plus checkpoint and loss-log persistence.
//!
//! Each loop logs one record per update, computed on the batch before the
//! update, and then a final record at `step = steps` holding the final
//! model's loss on the last batch, so the log can be replayed against the
//! saved model.

mod checkpoint;
mod config;
mod log;
mod optimizer;

pub use checkpoint::{
    decode_checkpoint, digest64, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    TensorEntry, TrainingMeta, FORMAT_VERSION, MAGIC,
};
pub use config::RunConfig;
pub use log::{format_log, parse_log, LossLog, LossRecord};
pub use optimizer::{Adam, OptimizerConfig, StepStats};

use crate::autodiff::Tape;
use crate::corpus::{prepare_sequences, split_held_out, BatchStream, MaskedBatch, Vocabulary};
use crate::distill::{distill_loss, init_student, mlm_loss, DistillConfig, LossBreakdown, TeacherValues};
use crate::encoder::{encode_batch, EncoderModel, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Stream labels for deriving sub-seeds from a run seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const EVAL: u64 = 2;
}

/// Seed of the batch stream of a run.
pub fn data_seed(seed: u64) -> u64 {
    SplitMix64::derived(seed, streams::DATA).next_u64()
}

/// Seed of the held-out masking of a run.
pub fn eval_seed(seed: u64) -> u64 {
    SplitMix64::derived(seed, streams::EVAL).next_u64()
}

/// A corpus cut into a shuffled training stream and fixed held-out
/// batches.
#[derive(Debug, Clone)]
pub struct RunData {
    pub vocab: Vocabulary,
    pub stream: BatchStream,
    /// Empty when the held-out split has no usable document.
    pub held_out: Vec<MaskedBatch>,
}

/// Splits `documents` per `config.data`, building the vocabulary from the
/// training part unless one is given.
pub fn prepare_run_data(
    documents: &[String],
    vocab: Option<Vocabulary>,
    config: &RunConfig,
    seed: u64,
) -> Result<RunData> {
    let data = &config.data;
    let (train, held) = split_held_out(documents, data.held_out_fraction);
    let vocab = match vocab {
        Some(v) => v,
        None => Vocabulary::build(&train, config.model.vocab_size)?,
    };
    if vocab.len() > config.model.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} entries but the model embeds {}",
            vocab.len(),
            config.model.vocab_size
        )));
    }
    let max_len = config.model.max_sequence_len();
    let stream = BatchStream::new(
        prepare_sequences(&train, &vocab, data.n_max),
        data,
        vocab.len(),
        max_len,
        data_seed(seed),
    )?;
    let held = prepare_sequences(&held, &vocab, data.n_max);
    let held_out = if held.is_empty() {
        Vec::new()
    } else {
        BatchStream::new(held, data, vocab.len(), max_len, eval_seed(seed))?.fixed_batches(eval_seed(seed))?
    };
    Ok(RunData {
        vocab,
        stream,
        held_out,
    })
}

/// Number of loss values kept in checkpoint metadata.
pub const LOSS_TAIL: usize = 8;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    pub records: Vec<LossRecord>,
    pub last_batch: MaskedBatch,
}

impl TrainOutcome {
    pub fn meta(&self, seed: u64) -> TrainingMeta {
        let start = self.records.len().saturating_sub(LOSS_TAIL);
        TrainingMeta {
            step: self.records.last().map_or(0, |r| r.step as u64),
            seed,
            loss_tail: self.records[start..].iter().map(|r| r.loss.total).collect(),
        }
    }
}

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        Err(Error::Config("steps must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn diverged(step: usize, source: Error) -> Error {
    match source {
        e @ Error::Divergence { .. } => e,
        e => Error::Divergence {
            step,
            source: Box::new(e),
        },
    }
}

fn finite_loss(loss: LossBreakdown) -> Result<LossBreakdown> {
    if loss.total.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite { op: "loss" })
    }
}

/// Masked-LM loss of `model` on `batch`, accumulating gradients into the
/// model.
fn mlm_pass(model: &mut EncoderModel, batch: &MaskedBatch) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let out = encode_batch(&mut tape, &bound, &batch.sequences())?;
    let loss = mlm_loss(&mut tape, out.log_probs, batch)?;
    let value = tape.value(loss).item() as f64;
    let breakdown = finite_loss(LossBreakdown {
        mlm: value,
        total: value,
        token_count: batch.token_count(),
        masked_count: batch.masked_count(),
        ..Default::default()
    })?;
    tape.backward(loss)?;
    model.accumulate_grads(&tape, &bound);
    Ok(breakdown)
}

/// MLM loss of `model` on `batch`, without gradients.
pub fn mlm_batch_loss(model: &EncoderModel, batch: &MaskedBatch) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let out = encode_batch(&mut tape, &bound, &batch.sequences())?;
    let loss = mlm_loss(&mut tape, out.log_probs, batch)?;
    let value = tape.value(loss).item() as f64;
    Ok(LossBreakdown {
        mlm: value,
        total: value,
        token_count: batch.token_count(),
        masked_count: batch.masked_count(),
        ..Default::default()
    })
}

/// Trains `model` on masked-LM loss alone.
pub fn train_mlm(
    mut model: EncoderModel,
    stream: &mut BatchStream,
    steps: usize,
    hyper: &OptimizerConfig,
    observer: &mut dyn FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    check_steps(steps)?;
    let mut adam = Adam::new(&model, hyper, steps as u64)?;
    let mut records = Vec::with_capacity(steps + 1);
    let mut batch = None;
    for step in 0..steps {
        let b = stream.next_batch()?;
        let loss = mlm_pass(&mut model, &b).map_err(|e| diverged(step, e))?;
        adam.step(&mut model).map_err(|e| diverged(step, e))?;
        let record = LossRecord { step, loss };
        observer(&record);
        records.push(record);
        batch = Some(b);
    }
    let last_batch = batch.expect("steps >= 1");
    let loss = finite_loss(mlm_batch_loss(&model, &last_batch)?).map_err(|e| diverged(steps, e))?;
    let record = LossRecord { step: steps, loss };
    observer(&record);
    records.push(record);
    Ok(TrainOutcome {
        model,
        records,
        last_batch,
    })
}

/// Pretrains a freshly initialized teacher on masked-LM loss.
pub fn train_teacher(
    config: &ModelConfig,
    stream: &mut BatchStream,
    steps: usize,
    seed: u64,
    hyper: &OptimizerConfig,
    observer: &mut dyn FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    check_steps(steps)?;
    let model = EncoderModel::init_random(config, seed)?;
    train_mlm(model, stream, steps, hyper, observer)
}

/// Teacher hidden states and log-probabilities for a batch, computed on a
/// private tape with no gradient.
pub fn teacher_forward(teacher: &EncoderModel, batch: &MaskedBatch) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = teacher.bind(&mut tape, false);
    let out = encode_batch(&mut tape, &bound, &batch.sequences())?;
    Ok((tape.value(out.hidden).clone(), tape.value(out.log_probs).clone()))
}

fn distill_pass(
    student: &mut EncoderModel,
    teacher: &EncoderModel,
    batch: &MaskedBatch,
    config: &DistillConfig,
    update: bool,
) -> Result<LossBreakdown> {
    let (hidden, log_probs) = teacher_forward(teacher, batch)?;
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape, update);
    let out = encode_batch(&mut tape, &bound, &batch.sequences())?;
    let teacher_values = TeacherValues {
        hidden: tape.constant(hidden),
        log_probs: tape.constant(log_probs),
    };
    let loss = distill_loss(&mut tape, &out, teacher_values, batch, config)?;
    let breakdown = finite_loss(loss.breakdown)?;
    if update {
        tape.backward(loss.total)?;
        student.accumulate_grads(&tape, &bound);
    }
    Ok(breakdown)
}

/// Distillation loss of `student` against `teacher` on `batch`, without
/// gradients.
pub fn distill_batch_loss(
    student: &EncoderModel,
    teacher: &EncoderModel,
    batch: &MaskedBatch,
    config: &DistillConfig,
) -> Result<LossBreakdown> {
    let mut student = student.clone();
    distill_pass(&mut student, teacher, batch, config, false)
}

/// Optimizes `student` on the blended objective against a frozen teacher.
pub fn distill_into(
    mut student: EncoderModel,
    teacher: &EncoderModel,
    stream: &mut BatchStream,
    steps: usize,
    config: &DistillConfig,
    hyper: &OptimizerConfig,
    observer: &mut dyn FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    check_steps(steps)?;
    config.validate()?;
    let mut adam = Adam::new(&student, hyper, steps as u64)?;
    let mut records = Vec::with_capacity(steps + 1);
    let mut batch = None;
    for step in 0..steps {
        let b = stream.next_batch()?;
        let loss = distill_pass(&mut student, teacher, &b, config, true).map_err(|e| diverged(step, e))?;
        adam.step(&mut student).map_err(|e| diverged(step, e))?;
        let record = LossRecord { step, loss };
        observer(&record);
        records.push(record);
        batch = Some(b);
    }
    let last_batch = batch.expect("steps >= 1");
    let loss = distill_batch_loss(&student, teacher, &last_batch, config).map_err(|e| diverged(steps, e))?;
    let record = LossRecord { step: steps, loss };
    observer(&record);
    records.push(record);
    Ok(TrainOutcome {
        model: student,
        records,
        last_batch,
    })
}

/// Builds a student with [`init_student`] and distills into it.
pub fn distill(
    teacher: &EncoderModel,
    student_config: &ModelConfig,
    stream: &mut BatchStream,
    steps: usize,
    config: &DistillConfig,
    hyper: &OptimizerConfig,
    observer: &mut dyn FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    check_steps(steps)?;
    let student = init_student(teacher, student_config, config.copy_stride)?;
    distill_into(student, teacher, stream, steps, config, hyper, observer)
}
