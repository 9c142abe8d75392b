//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Matrix, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::config("train.lr", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("train.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        Ok(())
    }
}

/// `base · ½(1 + cos(π·step/total))`; constant `base` when `total == 0`.
pub fn cosine_lr(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = (step.min(total_steps)) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Moments and step counter for every parameter of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub total_steps: u64,
    pub step: u64,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
}

impl OptimState {
    pub fn new(config: AdamWConfig, total_steps: u64, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            total_steps,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// Learning rate applied by the next call to [`OptimState::step`]. The
    /// schedule is evaluated at the number of completed steps, so the first
    /// update uses `base_lr`.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.config.base_lr, self.step, self.total_steps)
    }

    pub fn moments(&self) -> (&[Matrix], &[Matrix]) {
        (&self.first_moment, &self.second_moment)
    }

    /// One AdamW update. Parameters without an entry in `grads` are treated as
    /// having a zero gradient. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.first_moment.len() != params.len() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "optimizer tracks {} tensors, store has {}",
                    self.first_moment.len(),
                    params.len()
                ),
            ));
        }
        for (id, g) in grads.iter() {
            if id.0 >= params.len() || g.shape() != params.get(id).shape() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("gradient shape mismatch for `{}`", params.name(id)),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: params.name(id).to_string(),
                });
            }
        }

        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as f64;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);

        for id in params.ids().collect::<Vec<_>>() {
            let grad = grads.get(id);
            let m = &mut self.first_moment[id.0];
            let v = &mut self.second_moment[id.0];
            let p = params.get_mut(id);
            for k in 0..p.len() {
                let g = grad.map_or(0.0, |g| g.data()[k]);
                let mk = beta1 * m.data()[k] + (1.0 - beta1) * g;
                let vk = beta2 * v.data()[k] + (1.0 - beta2) * g * g;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let update = (mk / bc1) / ((vk / bc2).sqrt() + eps);
                let pk = &mut p.data_mut()[k];
                *pk -= lr * (update + weight_decay * *pk);
            }
        }
        Ok(())
    }
}
