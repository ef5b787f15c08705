use serde::{Deserialize, Serialize};

use super::{ModelError, ModelState, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            warmup_steps: 100,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.peak_lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(ModelError::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Decoupled weight decay Adam with linear warmup, then a constant rate.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: OptimConfig,
    decay_mask: Vec<bool>,
}

impl AdamW {
    pub fn new<T: Scalar>(config: OptimConfig, state: &ModelState<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let mut decay_mask = vec![false; state.num_params()];
        for spec in &state.layout.tensors {
            if spec.decays() {
                decay_mask[spec.range()].fill(true);
            }
        }
        Ok(Self { config, decay_mask })
    }

    /// Learning rate used for optimizer step `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 || step >= w {
            self.config.peak_lr
        } else {
            self.config.peak_lr * step as f64 / w as f64
        }
    }

    /// Applies one update and returns the learning rate used.
    pub fn step<T: Scalar>(&self, state: &mut ModelState<T>, grads: &mut [T]) -> f64 {
        let c = &self.config;
        if let Some(max) = c.clip_norm {
            let norm = grads.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
            if norm > max {
                let s = T::of(max / norm);
                for g in grads.iter_mut() {
                    *g *= s;
                }
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let lr = self.lr_at(state.step);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        let decay = T::of(1.0 - lr * c.weight_decay);
        for (i, &g) in grads.iter().enumerate() {
            let m = b1 * state.adam_m[i] + ob1 * g;
            let v = b2 * state.adam_v[i] + ob2 * g * g;
            state.adam_m[i] = m;
            state.adam_v[i] = v;
            let p = &mut state.params[i];
            if self.decay_mask[i] {
                *p *= decay;
            }
            *p -= step_size * m / ((v * inv_bc2).sqrt() + eps);
        }
        lr
    }
}
