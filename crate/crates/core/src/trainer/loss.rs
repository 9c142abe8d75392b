//! Weighted L1 trajectory loss with an endpoint term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Trajectory, FUTURE_LEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Per-waypoint weights `w_t`.
    pub step: Vec<f64>,
    /// Extra weight on the final waypoint.
    pub end: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            step: vec![1.0; FUTURE_LEN],
            end: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.step.len() != FUTURE_LEN {
            return Err(Error::config(
                "train.step_weights",
                format!("needs {FUTURE_LEN} entries, got {}", self.step.len()),
            ));
        }
        if self.step.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::config("train.step_weights", "every weight must be > 0"));
        }
        if !(self.end.is_finite() && self.end >= 0.0) {
            return Err(Error::config("train.end_weight", "must be >= 0"));
        }
        Ok(())
    }

    fn weight(&self, t: usize) -> f64 {
        self.step[t] + if t == FUTURE_LEN - 1 { self.end } else { 0.0 }
    }
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Σ_t w_t ‖ŷ_t − Y_t‖₁ + λ_end ‖ŷ_T − Y_T‖₁`.
pub fn trajectory_loss(pred: &Trajectory, target: &Trajectory, weights: &LossWeights) -> f64 {
    (0..FUTURE_LEN)
        .map(|t| {
            let (p, y) = (pred.0[t], target.0[t]);
            weights.weight(t) * ((p[0] - y[0]).abs() + (p[1] - y[1]).abs())
        })
        .sum()
}

/// Loss and its gradient with respect to `pred`; exact ties contribute 0.
pub fn trajectory_loss_grad(
    pred: &Trajectory,
    target: &Trajectory,
    weights: &LossWeights,
) -> (f64, Trajectory) {
    let grad = Trajectory::from_fn(|t| {
        let w = weights.weight(t);
        [
            w * sign(pred.0[t][0] - target.0[t][0]),
            w * sign(pred.0[t][1] - target.0[t][1]),
        ]
    });
    (trajectory_loss(pred, target, weights), grad)
}
