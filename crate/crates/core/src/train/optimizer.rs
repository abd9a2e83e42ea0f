use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    /// Share of the run spent in linear warmup.
    pub warmup_fraction: f32,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_fraction: 0.05,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && (0.0..=1.0).contains(&self.warmup_fraction)
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub learning_rate: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Adam with linear warmup and global-norm clipping. Moment buffers follow
/// the model's canonical parameter order.
#[derive(Debug, Clone)]
pub struct Adam {
    config: OptimizerConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: u64,
    warmup_steps: u64,
}

impl Adam {
    pub fn new(model: &EncoderModel, config: &OptimizerConfig, total_steps: u64) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f32>> = model.leaves().iter().map(|t| vec![0.0; t.len()]).collect();
        Ok(Self {
            config: config.clone(),
            first: zeros.clone(),
            second: zeros,
            step: 0,
            warmup_steps: (config.warmup_fraction as f64 * total_steps as f64).round() as u64,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate applied on update number `step` (from 0).
    pub fn learning_rate(&self, step: u64) -> f64 {
        let base = self.config.learning_rate as f64;
        if step < self.warmup_steps {
            base * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            base
        }
    }

    /// Applies one update from the model's gradient buffers, then zeroes
    /// them. Tensors without a gradient buffer are left untouched.
    pub fn step(&mut self, model: &mut EncoderModel) -> Result<StepStats> {
        let mut sq = 0.0f64;
        model.visit(&mut |_, t| {
            if let Some(g) = t.grad() {
                sq += g.iter().map(|&x| x as f64 * x as f64).sum::<f64>();
            }
        });
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient" });
        }
        let clip = self.config.clip_norm as f64;
        let factor = if clip > 0.0 && grad_norm > clip {
            clip / grad_norm
        } else {
            1.0
        };
        let lr = self.learning_rate(self.step);
        self.step += 1;
        let (b1, b2) = (self.config.beta1 as f64, self.config.beta2 as f64);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let eps = self.config.epsilon as f64;
        let mut i = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_mut(&mut |t| {
            let Some(grad) = t.grad().map(<[f32]>::to_vec) else {
                i += 1;
                return;
            };
            let (m, v) = (&mut first[i], &mut second[i]);
            for (j, (p, g)) in t.data_mut().iter_mut().zip(grad).enumerate() {
                let g = g as f64 * factor;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                *p = (*p as f64 - update) as f32;
            }
            t.zero_grad();
            i += 1;
        });
        Ok(StepStats {
            learning_rate: lr,
            grad_norm,
        })
    }
}
