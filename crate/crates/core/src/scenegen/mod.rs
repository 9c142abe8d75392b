//! Synthetic driving scenes: constant-curvature maneuvers along lanelet
//! centerlines, templated instructions, the past-only lanelet command and
//! the command-reliability regimes.

mod instructions;
pub mod io;
pub mod lanelet;

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use instructions::{
    filler_instruction, instruction_for, templates_for, FILLER_TEMPLATES, LEFT_TEMPLATES,
    RIGHT_TEMPLATES, STOP_TEMPLATES, STRAIGHT_TEMPLATES,
};
pub use io::{load_dataset, save_dataset, Dataset, DatasetHeader};

use crate::error::{Error, Result};
use crate::trajectory::{arc_point, Command, CommandClass, Point, Trajectory, DT, HISTORY_LEN};
use crate::util::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Maneuver {
    Left,
    Straight,
    Right,
    Stop,
}

impl Maneuver {
    pub const ALL: [Maneuver; 4] = [Maneuver::Left, Maneuver::Straight, Maneuver::Right, Maneuver::Stop];

    /// Routing class that matches this maneuver. Stopping has no mode of its
    /// own and routes straight.
    pub fn command_class(self) -> CommandClass {
        match self {
            Maneuver::Left => CommandClass::Left,
            Maneuver::Right => CommandClass::Right,
            Maneuver::Straight | Maneuver::Stop => CommandClass::Straight,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub split: Split,
    pub maneuver: Maneuver,
    pub instruction: String,
    /// Past positions at 2 Hz, oldest first, ending at the origin.
    pub history: Vec<Point>,
    /// Lanelet centerlines in the ego frame.
    pub lanelets: Vec<Vec<Point>>,
    /// Ground-truth future.
    pub future: Trajectory,
}

impl Scene {
    /// Mean speed over the history steps, m/s.
    pub fn mean_history_speed(&self) -> f64 {
        mean_speed(&self.history)
    }
}

pub fn mean_speed(history: &[Point]) -> f64 {
    if history.len() < 2 {
        return 0.0;
    }
    let total: f64 = history
        .windows(2)
        .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
        .sum();
    total / ((history.len() - 1) as f64 * DT)
}

/// Scene generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Initial speed range for non-stop scenes, m/s.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Turn curvature magnitude range, 1/m.
    pub curvature_min: f64,
    pub curvature_max: f64,
    /// Std of additive noise on future waypoints, m.
    pub noise_sigma: f64,
    /// Fraction of scenes whose instruction is maneuver-neutral.
    pub filler_fraction: f64,
    /// Sampling weights for left, straight, right, stop.
    pub maneuver_mix: [f64; 4],
    /// Upper speed bound for stop scenes (lower bound is `speed_min`).
    pub stop_speed_max: f64,
    /// Time to come to rest in stop scenes, s.
    pub stop_time_min: f64,
    pub stop_time_max: f64,
    pub val_fraction: f64,
    /// Centerline extent behind and ahead of the ego, m.
    pub lane_behind: f64,
    pub lane_ahead: f64,
    pub lane_spacing: f64,
    pub lane_width: f64,
    pub max_distractors: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            speed_min: 1.0,
            speed_max: 12.0,
            curvature_min: 0.02,
            curvature_max: 0.15,
            noise_sigma: 0.1,
            filler_fraction: 0.25,
            maneuver_mix: [0.3, 0.3, 0.3, 0.1],
            stop_speed_max: 2.0,
            stop_time_min: 1.0,
            stop_time_max: 4.0,
            val_fraction: 0.2,
            lane_behind: 20.0,
            lane_ahead: 40.0,
            lane_spacing: 1.0,
            lane_width: 3.5,
            max_distractors: 2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |key: &str, lo: f64, hi: f64| -> Result<()> {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(key, format!("empty range [{lo}, {hi}]")));
            }
            Ok(())
        };
        range("generator.speed_min", self.speed_min, self.speed_max)?;
        if self.speed_min < 0.0 {
            return Err(Error::config("generator.speed_min", "must be >= 0"));
        }
        range("generator.curvature_min", self.curvature_min, self.curvature_max)?;
        if self.curvature_min < 0.0 {
            return Err(Error::config("generator.curvature_min", "must be >= 0"));
        }
        range("generator.stop_speed_max", self.speed_min, self.stop_speed_max)?;
        range("generator.stop_time_min", self.stop_time_min, self.stop_time_max)?;
        if self.stop_time_min <= 0.0 {
            return Err(Error::config("generator.stop_time_min", "must be > 0"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("generator.noise_sigma", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.filler_fraction) {
            return Err(Error::config("generator.filler_fraction", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("generator.val_fraction", "must lie in [0, 1)"));
        }
        if self.maneuver_mix.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.maneuver_mix.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::config(
                "generator.maneuver_mix",
                "weights must be finite, >= 0 and not all zero",
            ));
        }
        if !(self.lane_spacing > 0.0) || !(self.lane_behind >= 0.0) || !(self.lane_ahead > 0.0) {
            return Err(Error::config("generator.lane_spacing", "lane extents must be positive"));
        }
        Ok(())
    }
}

/// Settings of the past-only lanelet command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommandConfig {
    /// Arc length ahead of the match point over which heading change is measured, m.
    pub lookahead: f64,
    /// Heading change beyond which a turn is declared, degrees.
    pub threshold_deg: f64,
}

impl Default for CommandConfig {
    fn default() -> Self {
        Self {
            lookahead: 20.0,
            threshold_deg: 15.0,
        }
    }
}

/// Generates `n_scenes` scenes. Scene `i` depends only on `(seed, i)`, and
/// the last `round(n · val_fraction)` ids form the validation split.
pub fn generate_dataset(seed: u64, n_scenes: usize, config: &GeneratorConfig) -> Result<Vec<Scene>> {
    if n_scenes == 0 {
        return Err(Error::config("data.n_scenes", "must be > 0"));
    }
    config.validate()?;
    let n_val = (n_scenes as f64 * config.val_fraction).round() as usize;
    let n_train = n_scenes - n_val;
    (0..n_scenes as u64)
        .map(|id| {
            let split = if (id as usize) < n_train {
                Split::Train
            } else {
                Split::Val
            };
            generate_scene(seed, id, split, config)
        })
        .collect()
}

pub fn generate_scene(seed: u64, id: u64, split: Split, config: &GeneratorConfig) -> Result<Scene> {
    let mut rng = rng_for(&[seed, id]);
    let mix = WeightedIndex::new(config.maneuver_mix)
        .map_err(|e| Error::config("generator.maneuver_mix", e.to_string()))?;
    let maneuver = Maneuver::ALL[mix.sample(&mut rng)];

    let curvature = match maneuver {
        Maneuver::Left | Maneuver::Right => {
            let k = rng.random_range(config.curvature_min..=config.curvature_max);
            if maneuver == Maneuver::Left {
                k
            } else {
                -k
            }
        }
        Maneuver::Straight | Maneuver::Stop => 0.0,
    };
    let (speed, stop_time) = if maneuver == Maneuver::Stop {
        (
            rng.random_range(config.speed_min..=config.stop_speed_max),
            Some(rng.random_range(config.stop_time_min..=config.stop_time_max)),
        )
    } else {
        (rng.random_range(config.speed_min..=config.speed_max), None)
    };

    let history = (0..HISTORY_LEN)
        .map(|i| {
            let t = -((HISTORY_LEN - 1 - i) as f64) * DT;
            let p = arc_point(curvature, speed * t);
            [p.x, p.y]
        })
        .collect();

    let noise = Normal::new(0.0, config.noise_sigma.max(0.0))
        .map_err(|e| Error::config("generator.noise_sigma", e.to_string()))?;
    let future = Trajectory::from_fn(|k| {
        let t = (k + 1) as f64 * DT;
        let s = match stop_time {
            Some(ts) if t >= ts => speed * ts / 2.0,
            Some(ts) => speed * t - speed / ts * t * t / 2.0,
            None => speed * t,
        };
        let p = arc_point(curvature, s);
        if config.noise_sigma > 0.0 {
            [p.x + noise.sample(&mut rng), p.y + noise.sample(&mut rng)]
        } else {
            [p.x, p.y]
        }
    });

    let lanelets = build_lanelets(curvature, config, &mut rng);

    let instruction = if rng.random::<f64>() < config.filler_fraction {
        filler_instruction(&mut rng)
    } else {
        instruction_for(maneuver, &mut rng)
    };

    Ok(Scene {
        id,
        split,
        maneuver,
        instruction,
        history,
        lanelets,
        future,
    })
}

/// Ego lane following the maneuver curvature, plus laterally offset
/// neighbours at random positions in the list.
fn build_lanelets<R: Rng + ?Sized>(curvature: f64, config: &GeneratorConfig, rng: &mut R) -> Vec<Vec<Point>> {
    let n = ((config.lane_behind + config.lane_ahead) / config.lane_spacing).round() as usize;
    let lane = |offset: f64| -> Vec<Point> {
        (0..=n)
            .map(|i| {
                let s = -config.lane_behind + i as f64 * config.lane_spacing;
                let p = arc_point(curvature, s);
                let heading = curvature * s;
                [p.x - offset * heading.sin(), p.y + offset * heading.cos()]
            })
            .collect()
    };
    let n_distractors = rng.random_range(0..=config.max_distractors);
    let mut lanelets = vec![lane(0.0)];
    for j in 0..n_distractors {
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        lanelets.push(lane(side * config.lane_width * (j + 1) as f64));
    }
    let ego_slot = rng.random_range(0..lanelets.len());
    lanelets.swap(0, ego_slot);
    lanelets
}

/// Infers the routing command from the current ego position and the
/// centerline it is matched to. Only the history and the map are read.
pub fn infer_lanelet_command(history: &[Point], lanelets: &[Vec<Point>], config: &CommandConfig) -> Result<Command> {
    if history.len() < 2 {
        return Err(Error::Inference(format!(
            "history has {} points, need at least 2",
            history.len()
        )));
    }
    if lanelets.is_empty() {
        return Err(Error::Inference("no lanelets".into()));
    }
    let current = history[history.len() - 1];
    let m = lanelet::nearest_lanelet(&current, lanelets)
        .ok_or_else(|| Error::Inference("all lanelets are empty".into()))?;
    let centerline = lanelet::Centerline::new(&lanelets[m.lanelet]);
    let change = centerline.heading_change(m.station, config.lookahead).to_degrees();
    let class = if change > config.threshold_deg {
        CommandClass::Left
    } else if change < -config.threshold_deg {
        CommandClass::Right
    } else {
        CommandClass::Straight
    };
    Ok(Command::one_hot(class))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Reliable,
    Random,
}

/// Reliable regime passes `command` through; random regime replaces it by a
/// uniform one-hot draw that does not look at `command`.
pub fn perturb_command<R: Rng + ?Sized>(command: Command, regime: Regime, rng: &mut R) -> Command {
    match regime {
        Regime::Reliable => command,
        Regime::Random => {
            let i = rng.random_range(0..3);
            Command::one_hot(CommandClass::from_index(i).expect("index < 3"))
        }
    }
}
