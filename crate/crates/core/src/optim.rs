//! AdamW with decoupled weight decay, global-norm gradient clipping, and a
//! linear-warmup / cosine-decay learning-rate schedule.

use crate::error::OptimError;

/// Linear ramp from 0 to `base_lr` over `warmup_steps`, then cosine decay to 0
/// at `total_steps`. Continuous at the warmup boundary: `lr(warmup) = base_lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub base_lr: f64,
}

impl LrSchedule {
    pub fn new(warmup_steps: usize, total_steps: usize, base_lr: f64) -> Result<Self, OptimError> {
        if total_steps == 0 || warmup_steps > total_steps || base_lr <= 0.0 {
            return Err(OptimError::InvalidSchedule {
                warmup: warmup_steps,
                total: total_steps,
            });
        }
        Ok(Self {
            warmup_steps,
            total_steps,
            base_lr,
        })
    }

    pub fn lr_at(&self, step: usize) -> Result<f64, OptimError> {
        if step > self.total_steps {
            return Err(OptimError::ScheduleExhausted {
                step,
                total: self.total_steps,
            });
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        if span == 0.0 {
            return Ok(if step == self.total_steps { 0.0 } else { self.base_lr });
        }
        let progress = (step - self.warmup_steps) as f64 / span;
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Scales every gradient by `cap / norm` when the global l2 norm exceeds
/// `cap`; returns the scale applied (1.0 when already within the cap).
/// A non-finite gradient is a training-divergence error naming the parameter.
pub fn clip_global_norm(
    names: &[String],
    grads: &mut [Vec<f64>],
    cap: f64,
) -> Result<f64, OptimError> {
    let mut sum_sq = 0.0;
    for (name, grad) in names.iter().zip(grads.iter()) {
        for v in grad {
            if !v.is_finite() {
                return Err(OptimError::NonFiniteGradient { name: name.clone() });
            }
            sum_sq += v * v;
        }
    }
    let norm = sum_sq.sqrt();
    if norm <= cap {
        return Ok(1.0);
    }
    let scale = cap / norm;
    for grad in grads.iter_mut() {
        for v in grad.iter_mut() {
            *v *= scale;
        }
    }
    Ok(scale)
}

/// AdamW optimizer state: bias-corrected first/second moments plus the
/// decoupled weight-decay and base-rate hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub step_count: usize,
    pub learning_rate_base: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamW {
    /// Conventional constants; the recipe only fixes the base rate and decay.
    pub const DEFAULT_BETA1: f64 = 0.9;
    pub const DEFAULT_BETA2: f64 = 0.999;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(param_sizes: &[usize], learning_rate_base: f64, weight_decay: f64) -> Self {
        Self {
            step_count: 0,
            learning_rate_base,
            weight_decay,
            beta1: Self::DEFAULT_BETA1,
            beta2: Self::DEFAULT_BETA2,
            eps_adam: Self::DEFAULT_EPS,
            first_moment: param_sizes.iter().map(|n| vec![0.0; *n]).collect(),
            second_moment: param_sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn first_moment(&self, idx: usize) -> &[f64] {
        &self.first_moment[idx]
    }

    pub fn second_moment(&self, idx: usize) -> &[f64] {
        &self.second_moment[idx]
    }

    /// One optimizer step at learning rate `lr` (already scheduled).
    ///
    /// Weight decay is decoupled: `theta -= lr * wd * theta` is applied
    /// separately from the moment-based update. `step_count` increments by
    /// exactly one.
    pub fn step(
        &mut self,
        names: &[String],
        params: &mut [Vec<f64>],
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<(), OptimError> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(OptimError::GradCountMismatch {
                params: params.len(),
                grads: grads.len(),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for idx in 0..params.len() {
            let (p, g) = (&mut params[idx], &grads[idx]);
            if p.len() != g.len() {
                return Err(OptimError::StateShapeMismatch {
                    name: names.get(idx).cloned().unwrap_or_default(),
                    which: "gradient",
                    param: p.len(),
                    state: g.len(),
                });
            }
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            for i in 0..p.len() {
                p[i] -= lr * self.weight_decay * p[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps_adam);
            }
        }
        Ok(())
    }
}
