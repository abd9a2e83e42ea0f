//! Student construction and the three-part distillation objective.
//!
//! All losses take packed `N`-column tape values (padding never appears in
//! packed form) and average over tokens. Teacher values are detached before
//! use, so no gradient can reach the teacher.

use serde::{Deserialize, Serialize};

use crate::autodiff::{KlDirection, Tape, Var};
use crate::corpus::MaskedBatch;
use crate::encoder::{EncodedBatch, EncoderModel, ModelConfig};
use crate::error::{Error, Result};

/// How the cosine term enters the minimized objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineMode {
    /// Mean of `1 - cos`: zero when aligned.
    #[default]
    OneMinus,
    /// Mean of `cos` as printed; minimizing it anti-aligns the student.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
    pub copy_stride: usize,
    /// Student depth; defaults to the teacher depth divided by the stride.
    pub student_layers: Option<usize>,
    pub temperature: f32,
    pub kl_direction: KlDirection,
    pub cosine_mode: CosineMode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.3,
            gamma: 0.2,
            copy_stride: 2,
            student_layers: None,
            temperature: 1.0,
            kl_direction: KlDirection::Forward,
            cosine_mode: CosineMode::OneMinus,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if self.copy_stride == 0 {
            return Err(Error::Config("copy_stride must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// `alpha * soft_label + beta * cosine + gamma * mlm`.
    pub fn blend(&self, soft_label: f64, cosine: f64, mlm: f64) -> f64 {
        self.alpha as f64 * soft_label + self.beta as f64 * cosine + self.gamma as f64 * mlm
    }

    /// The student shape implied by a teacher shape.
    pub fn student_config(&self, teacher: &ModelConfig) -> ModelConfig {
        let layers = self
            .student_layers
            .unwrap_or(teacher.num_layers / self.copy_stride.max(1));
        teacher.with_layers(layers)
    }
}

/// Per-step loss record.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub soft_label: f64,
    pub cosine: f64,
    pub mlm: f64,
    pub total: f64,
    pub token_count: usize,
    pub masked_count: usize,
}

/// Builds a student from `teacher`: embeddings, embedding norm and MLM-head
/// bias are copied, and student layer `i` is teacher layer `stride * i`.
pub fn init_student(
    teacher: &EncoderModel,
    student_config: &ModelConfig,
    stride: usize,
) -> Result<EncoderModel> {
    student_config.validate()?;
    let t = &teacher.config;
    let s = student_config;
    let same_shape = t.hidden_size == s.hidden_size
        && t.num_heads == s.num_heads
        && t.ffn_size == s.ffn_size
        && t.vocab_size == s.vocab_size
        && t.max_positions == s.max_positions
        && t.layer_norm_eps == s.layer_norm_eps;
    if !same_shape {
        return Err(Error::Config(format!(
            "student {s:?} differs from teacher {t:?} beyond layer count"
        )));
    }
    if stride == 0 || stride * s.num_layers > t.num_layers {
        return Err(Error::Config(format!(
            "cannot take {} layers with stride {stride} from a {}-layer teacher",
            s.num_layers, t.num_layers
        )));
    }
    Ok(EncoderModel {
        config: s.clone(),
        word_embedding: teacher.word_embedding.clone(),
        positional_embedding: teacher.positional_embedding.clone(),
        embedding_norm: teacher.embedding_norm.clone(),
        layers: (0..s.num_layers)
            .map(|i| teacher.layers[stride * i].clone())
            .collect(),
        lm_head_bias: teacher.lm_head_bias.clone(),
    })
    .map(|mut m| {
        m.clear_grads();
        m
    })
}

fn tempered(tape: &mut Tape, log_probs: Var, temperature: f32) -> Result<Var> {
    if temperature == 1.0 {
        return Ok(log_probs);
    }
    let scaled = tape.scale(log_probs, 1.0 / temperature)?;
    tape.log_softmax_columns(scaled)
}

/// Mean over tokens of `D_KL(p_student || p_teacher)` (or the reverse).
pub fn soft_label_loss(
    tape: &mut Tape,
    student_log_probs: Var,
    teacher_log_probs: Var,
    config: &DistillConfig,
) -> Result<Var> {
    let (s, t) = (tape.shape(student_log_probs), tape.shape(teacher_log_probs));
    if s != t {
        return Err(Error::shape("soft_label_loss", s, t));
    }
    let tokens = s[s.len() - 1];
    let teacher = tape.detach(teacher_log_probs);
    let student = tempered(tape, student_log_probs, config.temperature)?;
    let teacher = tempered(tape, teacher, config.temperature)?;
    let kl = match config.kl_direction {
        KlDirection::Forward => tape.kl_log_columns(student, teacher)?,
        KlDirection::Reverse => tape.kl_log_columns(teacher, student)?,
    };
    tape.scale(kl, 1.0 / tokens as f32)
}

/// Mean over tokens of `1 - cos(h_student, h_teacher)`, or of the raw
/// cosine in [`CosineMode::Raw`].
pub fn cosine_loss(
    tape: &mut Tape,
    student_hidden: Var,
    teacher_hidden: Var,
    mode: CosineMode,
) -> Result<Var> {
    let teacher = tape.detach(teacher_hidden);
    let cos = tape.cosine_columns(student_hidden, teacher)?;
    let tokens = tape.shape(cos)[0];
    let sum = tape.sum(cos)?;
    let mean = tape.scale(sum, 1.0 / tokens as f32)?;
    match mode {
        CosineMode::Raw => Ok(mean),
        CosineMode::OneMinus => {
            let neg = tape.scale(mean, -1.0)?;
            tape.add_scalar(neg, 1.0)
        }
    }
}

/// Mean negative log-likelihood of the true ids at the masked positions.
pub fn mlm_loss(tape: &mut Tape, student_log_probs: Var, batch: &MaskedBatch) -> Result<Var> {
    let targets = batch.targets();
    if targets.is_empty() {
        return Err(Error::EmptyMask);
    }
    let shape = tape.shape(student_log_probs);
    if shape[shape.len() - 1] != batch.token_count() {
        return Err(Error::shape(
            "mlm_loss",
            shape,
            &[shape[0], batch.token_count()],
        ));
    }
    let nll = tape.nll(student_log_probs, &targets)?;
    tape.scale(nll, 1.0 / targets.len() as f32)
}

/// The blended objective and its components.
#[derive(Debug, Clone, Copy)]
pub struct DistillLoss {
    /// Differentiation root.
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Teacher outputs as tape values (typically constants).
#[derive(Debug, Clone, Copy)]
pub struct TeacherValues {
    pub hidden: Var,
    pub log_probs: Var,
}

/// `alpha * SoftLabel + beta * Cosine + gamma * MLM`.
pub fn distill_loss(
    tape: &mut Tape,
    student: &EncodedBatch,
    teacher: TeacherValues,
    batch: &MaskedBatch,
    config: &DistillConfig,
) -> Result<DistillLoss> {
    let soft = soft_label_loss(tape, student.log_probs, teacher.log_probs, config)?;
    let cosine = cosine_loss(tape, student.hidden, teacher.hidden, config.cosine_mode)?;
    let mlm = mlm_loss(tape, student.log_probs, batch)?;
    let a = tape.scale(soft, config.alpha)?;
    let b = tape.scale(cosine, config.beta)?;
    let c = tape.scale(mlm, config.gamma)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    let value = |v: Var| tape.value(v).item() as f64;
    Ok(DistillLoss {
        total,
        breakdown: LossBreakdown {
            soft_label: value(soft),
            cosine: value(cosine),
            mlm: value(mlm),
            total: value(total),
            token_count: batch.token_count(),
            masked_count: batch.masked_count(),
        },
    })
}
