//! Deterministic minibatch order and per-epoch command draws. Everything is
//! derived from `(seed, epoch, scene id)`, so resuming only needs the epoch.

use rand::seq::SliceRandom;

use crate::scenegen::{perturb_command, Regime};
use crate::trajectory::Command;
use crate::util::rng_for;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const COMMAND_STREAM: u64 = 0x434d_4453;
const EVAL_STREAM: u64 = 0x4556_414c;

pub fn steps_per_epoch(n_samples: usize, batch_size: usize) -> u64 {
    n_samples.div_ceil(batch_size.max(1)) as u64
}

pub fn total_steps(epochs: usize, n_samples: usize, batch_size: usize) -> u64 {
    epochs as u64 * steps_per_epoch(n_samples, batch_size)
}

/// Sample order for one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n_samples: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut rng_for(&[seed, SHUFFLE_STREAM, epoch]));
    order
}

/// Minibatches of one epoch, the last one possibly short.
pub fn epoch_batches(seed: u64, epoch: u64, n_samples: usize, batch_size: usize) -> Vec<Vec<usize>> {
    epoch_order(seed, epoch, n_samples)
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Command seen by scene `scene_id` during `epoch` under `regime`.
pub fn training_command(seed: u64, epoch: u64, scene_id: u64, lanelet: Command, regime: Regime) -> Command {
    perturb_command(lanelet, regime, &mut rng_for(&[seed, COMMAND_STREAM, epoch, scene_id]))
}

/// Command for scene `scene_id` at evaluation, drawn once from `seed` and
/// shared by every pass over that scene.
pub fn eval_command(seed: u64, scene_id: u64, lanelet: Command, regime: Regime) -> Command {
    perturb_command(lanelet, regime, &mut rng_for(&[seed, EVAL_STREAM, scene_id]))
}
