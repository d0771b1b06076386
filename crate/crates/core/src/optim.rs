//! AdamW with decoupled weight decay and a warmup-then-linear-decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::param::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr_peak: f32,
    pub warmup_steps: u64,
    /// Length of the schedule. The trainer treats 0 as "derive from the token
    /// budget".
    pub total_steps: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_peak: 3e-3,
            warmup_steps: 100,
            total_steps: 0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-9,
            weight_decay: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(config_err(format!(
                "optimizer betas must satisfy 0 < beta1 < beta2 < 1 (got {}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.eps <= 0.0 || !self.eps.is_finite() {
            return Err(config_err("optimizer eps must be positive"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(config_err(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.lr_peak < 0.0 || self.weight_decay < 0.0 {
            return Err(config_err("lr_peak and weight_decay must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` (1-based): linear warmup to
    /// `lr_peak` at `warmup_steps`, then linear decay to zero at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f32 {
        let peak = self.lr_peak as f64;
        let lr = if self.warmup_steps > 0 && step < self.warmup_steps {
            peak * step as f64 / self.warmup_steps as f64
        } else if step >= self.total_steps {
            0.0
        } else {
            let span = (self.total_steps - self.warmup_steps) as f64;
            peak * (self.total_steps - step) as f64 / span
        };
        lr as f32
    }
}

/// Applies one AdamW update to every parameter that carries a gradient and
/// returns the learning rate used. Weight decay skips 1-D tensors (norm gains).
pub fn adamw_step<T: Scalar>(params: &mut ParamStore<T>, config: &OptimizerConfig, step: u64) -> f32 {
    let lr = config.lr_at(step) as f64;
    let (b1, b2) = (config.beta1 as f64, config.beta2 as f64);
    let eps = config.eps as f64;
    for p in params.iter_mut() {
        let Some(grad) = p.value.grad().map(<[T]>::to_vec) else {
            continue;
        };
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let decay = if p.value.shape().len() >= 2 {
            1.0 - lr * config.weight_decay as f64
        } else {
            1.0
        };
        let (m, v) = (&mut p.adam_m, &mut p.adam_v);
        for (((x, &g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g.f64();
            let mn = b1 * m.f64() + (1.0 - b1) * g;
            let vn = b2 * v.f64() + (1.0 - b2) * g * g;
            *m = T::of(mn);
            *v = T::of(vn);
            let update = (mn / bc1) / ((vn / bc2).sqrt() + eps);
            *x = T::of(x.f64() * decay - lr * update);
        }
    }
    lr as f32
}
