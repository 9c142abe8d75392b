//! Adapter training on a frozen planner, the unconditional planner
//! baselines, training logs and resumable checkpoints.

pub mod loss;
pub mod schedule;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{residual_on_tape, AdapterParams, PreparedScene, RESIDUAL_DIM};
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, Gradients, Matrix, OptimState, Tape};
use crate::planner::{
    extract_ego_feature, fit_unconditional, FitSample, FitSettings, PlannerConfig, PlannerParams, PlannerStage,
};
use crate::scenegen::{infer_lanelet_command, CommandConfig, Regime, Scene};
use crate::textenc::FrozenEmbedding;
use crate::trajectory::{ModeTrajectories, FUTURE_LEN};

pub use loss::{trajectory_loss, trajectory_loss_grad, LossWeights};
pub use schedule::{eval_command, total_steps, training_command};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-waypoint loss weights `w_t`.
    pub step_weights: Vec<f64>,
    /// Endpoint weight `λ_end`.
    pub end_weight: f64,
    pub regime: Regime,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        let w = LossWeights::default();
        Self {
            epochs: 60,
            batch_size: 32,
            lr: opt.base_lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            step_weights: w.step,
            end_weight: w.end,
            regime: Regime::Reliable,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            base_lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            step: self.step_weights.clone(),
            end: self.end_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be > 0"));
        }
        self.optimizer().validate()?;
        self.loss_weights().validate()
    }

    pub fn fit_settings(&self, regime: Regime) -> FitSettings {
        FitSettings {
            optimizer: self.optimizer(),
            batch_size: self.batch_size,
            weights: self.loss_weights(),
            regime,
            seed: self.seed,
        }
    }
}

/// One line of the training log. Epoch 0 describes the initial parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_ade: f64,
}

pub const CHECKPOINT_FORMAT: &str = "nudge-adapter/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    /// Completed epochs.
    pub epoch: usize,
    /// Seed from which every batch order and command draw is derived.
    pub seed: u64,
    pub config_hash: String,
    pub planner_hash: String,
    pub params: AdapterParams,
    pub optimizer: OptimState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &serde_json::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", ck.format)));
        }
        ck.params.validate()?;
        Ok(ck)
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loss of one scene on its routed mode; gradients are added into `grads`.
fn sample_step(
    params: &AdapterParams,
    frozen: &FrozenEmbedding,
    scene: &PreparedScene,
    mode: usize,
    weights: &LossWeights,
    grads: Option<&mut Gradients>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let out = residual_on_tape(&mut tape, params, frozen, &scene.feature.values, Some(&scene.tokens))?;
    let delta = ModeTrajectories::from_flat(tape.value(out).data())?;
    let pred = scene.base.mode(mode).add(delta.mode(mode));
    let (loss, g) = trajectory_loss_grad(&pred, &scene.future, weights);
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss on scene {}", scene.id)));
    }
    if let Some(grads) = grads {
        let mut seed = Matrix::zeros(1, RESIDUAL_DIM);
        let offset = mode * FUTURE_LEN * 2;
        seed.data_mut()[offset..offset + FUTURE_LEN * 2].copy_from_slice(&g.flatten());
        tape.backward_into(out, &seed, grads)?;
    }
    Ok(loss)
}

/// Mean displacement error of the with-text prediction on `scenes`, using
/// the evaluation command stream of `seed`.
pub fn mean_ade(
    params: &AdapterParams,
    frozen: &FrozenEmbedding,
    scenes: &[PreparedScene],
    regime: Regime,
    seed: u64,
) -> Result<f64> {
    if scenes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in scenes {
        let c = eval_command(seed, s.id, s.lanelet_command, regime);
        let p = crate::adapter::predict(params, frozen, s, &c, true)?;
        total += (0..FUTURE_LEN)
            .map(|k| (p.trajectory.0[k][0] - s.future.0[k][0]).hypot(p.trajectory.0[k][1] - s.future.0[k][1]))
            .sum::<f64>()
            / FUTURE_LEN as f64;
    }
    Ok(total / scenes.len() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

/// Everything `train_adapter` needs besides the configuration.
pub struct TrainInputs<'a> {
    pub train: &'a [PreparedScene],
    pub val: &'a [PreparedScene],
    pub frozen: &'a FrozenEmbedding,
    pub planner_hash: &'a str,
    pub config_hash: &'a str,
}

/// Trains φ with the planner frozen. Starts from `init` (which should be
/// identity-initialized) or continues `resume`, and stops after
/// `stop_after` completed epochs if given. Only the trajectory loss on the
/// routed mode is optimized.
pub fn train_adapter(
    inputs: &TrainInputs<'_>,
    init: AdapterParams,
    config: &TrainConfig,
    resume: Option<Checkpoint>,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let weights = config.loss_weights();
    let n = inputs.train.len();
    let total = total_steps(config.epochs, n, config.batch_size);

    let (mut params, mut optim, start) = match resume {
        Some(ck) => {
            if ck.config_hash != inputs.config_hash {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was trained with config {} but the run uses {}",
                    ck.config_hash, inputs.config_hash
                )));
            }
            if ck.planner_hash != inputs.planner_hash {
                return Err(Error::Checkpoint("checkpoint belongs to a different planner".into()));
            }
            (ck.params, ck.optimizer, ck.epoch)
        }
        None => {
            let optim = OptimState::new(config.optimizer(), total, &init.store);
            (init, optim, 0)
        }
    };
    let end = stop_after.unwrap_or(config.epochs).min(config.epochs);

    let mut log = Vec::new();
    if start == 0 {
        let mut loss = 0.0;
        for s in inputs.train {
            let c = training_command(config.seed, 0, s.id, s.lanelet_command, config.regime);
            loss += sample_step(&params, inputs.frozen, s, c.class()?.index(), &weights, None)?;
        }
        log.push(LogRecord {
            epoch: 0,
            lr: optim.current_lr(),
            train_loss: loss / n.max(1) as f64,
            val_ade: mean_ade(&params, inputs.frozen, inputs.val, config.regime, config.seed)?,
        });
    }

    for epoch in start..end {
        let lr = optim.current_lr();
        let mut epoch_loss = 0.0;
        for batch in schedule::epoch_batches(config.seed, epoch as u64, n, config.batch_size) {
            let mut grads = Gradients::new();
            for &i in &batch {
                let s = &inputs.train[i];
                let c = training_command(config.seed, epoch as u64, s.id, s.lanelet_command, config.regime);
                epoch_loss += sample_step(&params, inputs.frozen, s, c.class()?.index(), &weights, Some(&mut grads))?;
            }
            grads.scale(1.0 / batch.len() as f64);
            optim.step(&mut params.store, &grads)?;
        }
        log.push(LogRecord {
            epoch: epoch + 1,
            lr,
            train_loss: epoch_loss / n.max(1) as f64,
            val_ade: mean_ade(&params, inputs.frozen, inputs.val, config.regime, config.seed)?,
        });
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            epoch: end.max(start),
            seed: config.seed,
            config_hash: inputs.config_hash.to_string(),
            planner_hash: inputs.planner_hash.to_string(),
            params,
            optimizer: optim,
        },
        log,
    })
}

pub fn encode_log(log: &[LogRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// The three frozen planners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub stage1: PlannerParams,
    pub init: PlannerParams,
    pub ft: PlannerParams,
}

impl Baselines {
    pub fn get(&self, stage: PlannerStage) -> &PlannerParams {
        match stage {
            PlannerStage::Stage1 => &self.stage1,
            PlannerStage::Init => &self.init,
            PlannerStage::Ft => &self.ft,
        }
    }
}

pub fn fit_samples(scenes: &[Scene], theta: &PlannerParams, command: &CommandConfig) -> Result<Vec<FitSample>> {
    scenes
        .iter()
        .map(|s| {
            Ok(FitSample {
                scene_id: s.id,
                feature: extract_ego_feature(s, theta)?,
                lanelet_command: infer_lanelet_command(&s.history, &s.lanelets, command)?,
                future: s.future,
            })
        })
        .collect()
}

/// Stage1 (no fit), Init (a short fit under reliable commands) and FT
/// (Init fitted for exactly the adapter's step budget under `regime`).
pub fn train_baselines(
    train: &[Scene],
    planner: &PlannerConfig,
    command: &CommandConfig,
    config: &TrainConfig,
    regime: Regime,
) -> Result<Baselines> {
    config.validate()?;
    let stage1 = PlannerParams::analytic(planner)?;
    let samples = fit_samples(train, &stage1, command)?;
    let budget = total_steps(config.epochs, train.len(), config.batch_size);
    let init_budget = (budget as f64 * planner.init_fraction).round() as u64;
    let init = fit_unconditional(
        &stage1,
        &samples,
        init_budget,
        &config.fit_settings(Regime::Reliable),
        PlannerStage::Init,
    )?;
    let ft = fit_unconditional(&init, &samples, budget, &config.fit_settings(regime), PlannerStage::Ft)?;
    Ok(Baselines { stage1, init, ft })
}
