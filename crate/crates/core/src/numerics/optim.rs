use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Hold `base_lr` after warmup.
    #[default]
    Constant,
    /// Decay linearly to zero at `total_steps`.
    LinearDecay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub total_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            base_lr: 2e-5,
            warmup_steps: 120,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
            total_steps: 0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr must be positive"));
        }
        if !(0.0 < b1 && b1 < 1.0 && 0.0 < b2 && b2 < 1.0) {
            return Err(Error::config("betas must lie in (0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate used by update number `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decay = match self.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::LinearDecay if step <= self.warmup_steps => 1.0,
            LrSchedule::LinearDecay => {
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let left = self.total_steps.saturating_sub(step) as f64;
                (left / span).clamp(0.0, 1.0)
            }
        };
        self.base_lr * warm * decay
    }
}

/// Decoupled weight-decay Adam with bias correction and linear warmup.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Ok(AdamW {
            config,
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step_count.max(1))
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    /// Returns the learning rate that was used.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<f64> {
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter {}",
                    params.name(*id)
                )));
            }
            if g.shape() != params.get(*id).shape() {
                return Err(Error::dim(format!(
                    "gradient shape {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    params.name(*id),
                    params.get(*id).shape()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = self.config.lr_at(self.step_count);
        let (b1, b2) = self.config.betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let wd = self.config.weight_decay;
        let eps = self.config.eps;
        for (id, g) in grads {
            let i = id.index();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let p = params.get_mut(*id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr * wd * p[k];
                p[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(lr)
    }

    pub fn round_to_f32(&mut self) {
        for t in self.first_moment.iter_mut().chain(self.second_moment.iter_mut()) {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
