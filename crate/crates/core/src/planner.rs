//! The frozen planner: handcrafted ego features under a fixed random
//! projection, and a three-mode constant-curvature decoder with linear
//! curvature and speed readouts.
//!
//! Every descriptor is invariant under mirroring the scene about the x axis,
//! so the feature carries turn magnitude but never turn direction. Direction
//! reaches the output only through the routing command or the residual.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, Gradients, Matrix, OptimState, ParamStore};
use crate::scenegen::lanelet::{nearest_lanelet, Centerline};
use crate::scenegen::{mean_speed, Regime, Scene};
use crate::trainer::loss::{trajectory_loss_grad, LossWeights};
use crate::trainer::schedule::{epoch_batches, steps_per_epoch, training_command};
use crate::trajectory::{
    arc_point, Command, ModeTrajectories, Point, Trajectory, DT, FUTURE_LEN, NUM_MODES,
};
use crate::util::{rng_for, stable_hash, wrap_angle};

/// History descriptors ahead of the lanelet profile.
pub const NUM_HISTORY_DESCRIPTORS: usize = 5;
const SPEED_SCALE: f64 = 0.1;
const CURVATURE_SCALE: f64 = 10.0;
const MIN_SEGMENT: f64 = 1e-9;
const PROJECTION_STREAM: u64 = 0x5452_554e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    /// Seed of the fixed trunk projection.
    pub seed: u64,
    /// Ego feature width `D_e`.
    pub feature_dim: usize,
    /// Arc-length stations (m) at which the lanelet heading change is read.
    pub stations: Vec<f64>,
    /// Base curvature per mode (1/m), ordered left, straight, right.
    pub base_curvature: [f64; NUM_MODES],
    /// Share of the full budget spent on the under-trained initial fit.
    pub init_fraction: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            feature_dim: 32,
            stations: vec![4.0, 8.0, 12.0, 16.0, 20.0],
            base_curvature: [0.06, 0.0, -0.06],
            init_fraction: 0.1,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::config("planner.feature_dim", "must be > 0"));
        }
        if self.stations.is_empty() || self.stations.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config("planner.stations", "needs at least one positive station"));
        }
        if self.base_curvature.iter().any(|k| !k.is_finite()) {
            return Err(Error::config("planner.base_curvature", "must be finite"));
        }
        if !(0.0..=1.0).contains(&self.init_fraction) {
            return Err(Error::config("planner.init_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn num_descriptors(&self) -> usize {
        NUM_HISTORY_DESCRIPTORS + self.stations.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerStage {
    /// Analytic planner with zero readouts.
    Stage1,
    /// Short fit on top of Stage1.
    Init,
    /// Full-budget fit without language.
    Ft,
}

impl PlannerStage {
    pub fn label(self) -> &'static str {
        match self {
            PlannerStage::Stage1 => "stage1",
            PlannerStage::Init => "init",
            PlannerStage::Ft => "ft",
        }
    }
}

/// Frozen planner weights θ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerParams {
    pub stage: PlannerStage,
    pub stations: Vec<f64>,
    pub base_curvature: [f64; NUM_MODES],
    /// Descriptor-to-feature projection, `num_descriptors × D_e`.
    pub projection: Matrix,
    /// `D_e × 3`.
    pub curvature_readout: Matrix,
    /// `1 × 3`.
    pub curvature_bias: Matrix,
    /// `D_e × 1`.
    pub speed_readout: Matrix,
    /// `1 × 1`.
    pub speed_bias: Matrix,
}

impl PlannerParams {
    /// The Stage1 planner: seeded projection, base arcs, zero readouts.
    pub fn analytic(config: &PlannerConfig) -> Result<Self> {
        config.validate()?;
        let n = config.num_descriptors();
        let d = config.feature_dim;
        let mut rng = rng_for(&[config.seed, PROJECTION_STREAM]);
        let projection = Matrix::gaussian(n, d, 1.0 / (n as f64).sqrt(), &mut rng);
        Ok(Self {
            stage: PlannerStage::Stage1,
            stations: config.stations.clone(),
            base_curvature: config.base_curvature,
            projection,
            curvature_readout: Matrix::zeros(d, NUM_MODES),
            curvature_bias: Matrix::zeros(1, NUM_MODES),
            speed_readout: Matrix::zeros(d, 1),
            speed_bias: Matrix::zeros(1, 1),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn hash(&self) -> String {
        stable_hash(self)
    }
}

/// Ego planning feature `e` plus the measured current speed the decoder
/// rolls out from.
#[derive(Clone, Debug, PartialEq)]
pub struct EgoFeature {
    /// `1 × D_e`.
    pub values: Matrix,
    pub current_speed: f64,
}

fn segment(a: &Point, b: &Point) -> (f64, f64) {
    (b[0] - a[0], b[1] - a[1])
}

/// Raw mirror-invariant descriptors: current speed, mean speed, heading-rate
/// magnitude, forward component of the last step, curvature magnitude, then
/// the heading-change magnitude of the matched lanelet at each station.
pub fn descriptors(history: &[Point], lanelets: &[Vec<Point>], stations: &[f64]) -> Result<Vec<f64>> {
    let n = history.len();
    if n < 2 {
        return Err(Error::Feature(format!("history has {n} points, need at least 2")));
    }
    let (dx, dy) = segment(&history[n - 2], &history[n - 1]);
    let last_len = dx.hypot(dy);
    let current_speed = last_len / DT;

    let (heading_rate, curvature) = if n >= 3 {
        let (px, py) = segment(&history[n - 3], &history[n - 2]);
        let prev_len = px.hypot(py);
        if prev_len > MIN_SEGMENT && last_len > MIN_SEGMENT {
            let turn = wrap_angle(dy.atan2(dx) - py.atan2(px)).abs();
            (turn / DT, turn / (0.5 * (prev_len + last_len)))
        } else {
            (0.0, 0.0)
        }
    } else {
        (0.0, 0.0)
    };

    let mut out = vec![
        SPEED_SCALE * current_speed,
        SPEED_SCALE * mean_speed(history),
        heading_rate,
        SPEED_SCALE * dx / DT,
        CURVATURE_SCALE * curvature,
    ];
    let here = history[n - 1];
    match nearest_lanelet(&here, lanelets) {
        Some(m) => {
            let centerline = Centerline::new(&lanelets[m.lanelet]);
            out.extend(stations.iter().map(|&s| centerline.heading_change(m.station, s).abs()));
        }
        None => out.extend(stations.iter().map(|_| 0.0)),
    }
    Ok(out)
}

/// Feature of a scene. Reads the history and lanelets only.
pub fn extract_ego_feature(scene: &Scene, theta: &PlannerParams) -> Result<EgoFeature> {
    feature_from_parts(&scene.history, &scene.lanelets, theta)
}

pub fn feature_from_parts(history: &[Point], lanelets: &[Vec<Point>], theta: &PlannerParams) -> Result<EgoFeature> {
    let d = descriptors(history, lanelets, &theta.stations)?;
    let values = Matrix::row_vector(d.clone()).matmul(&theta.projection)?;
    if !values.is_finite() {
        return Err(Error::Feature("non-finite ego feature".into()));
    }
    Ok(EgoFeature {
        values,
        current_speed: d[0] / SPEED_SCALE,
    })
}

fn dot(e: &Matrix, w: &Matrix, col: usize) -> f64 {
    e.data().iter().enumerate().map(|(i, v)| v * w.get(i, col)).sum()
}

/// Curvature of each mode and the shared speed.
pub fn mode_controls(feature: &EgoFeature, theta: &PlannerParams) -> ([f64; NUM_MODES], f64) {
    let e = &feature.values;
    let mut curvature = [0.0; NUM_MODES];
    for (m, k) in curvature.iter_mut().enumerate() {
        *k = theta.base_curvature[m] + dot(e, &theta.curvature_readout, m) + theta.curvature_bias.get(0, m);
    }
    let speed = feature.current_speed + dot(e, &theta.speed_readout, 0) + theta.speed_bias.get(0, 0);
    (curvature, speed)
}

fn waypoint_time(k: usize) -> f64 {
    (k + 1) as f64 * DT
}

fn rollout(curvature: f64, speed: f64) -> Trajectory {
    Trajectory::from_fn(|k| {
        let p = arc_point(curvature, speed * waypoint_time(k));
        [p.x, p.y]
    })
}

/// `Ŷ₀`: one constant-curvature, constant-speed rollout per mode.
pub fn decode_modes(feature: &EgoFeature, theta: &PlannerParams) -> ModeTrajectories {
    let (curvature, speed) = mode_controls(feature, theta);
    ModeTrajectories([
        rollout(curvature[0], speed),
        rollout(curvature[1], speed),
        rollout(curvature[2], speed),
    ])
}

/// The trajectory routed by a one-hot command.
pub fn select_mode(modes: &ModeTrajectories, command: &Command) -> Result<Trajectory> {
    Ok(*modes.mode(command.class()?.index()))
}

/// One training example for the unconditional fit.
#[derive(Clone, Debug)]
pub struct FitSample {
    pub scene_id: u64,
    pub feature: EgoFeature,
    pub lanelet_command: Command,
    pub future: Trajectory,
}

/// Optimization settings shared with adapter training.
#[derive(Clone, Debug, PartialEq)]
pub struct FitSettings {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub regime: Regime,
    pub seed: u64,
}

const READOUTS: [&str; 4] = ["curvature_readout", "curvature_bias", "speed_readout", "speed_bias"];

fn readout_store(theta: &PlannerParams) -> ParamStore {
    let mut store = ParamStore::new();
    store.insert(READOUTS[0], theta.curvature_readout.clone());
    store.insert(READOUTS[1], theta.curvature_bias.clone());
    store.insert(READOUTS[2], theta.speed_readout.clone());
    store.insert(READOUTS[3], theta.speed_bias.clone());
    store
}

fn write_back(theta: &mut PlannerParams, store: &ParamStore) {
    let get = |name: &str| store.get(store.id_of(name).expect("readout present")).clone();
    theta.curvature_readout = get(READOUTS[0]);
    theta.curvature_bias = get(READOUTS[1]);
    theta.speed_readout = get(READOUTS[2]);
    theta.speed_bias = get(READOUTS[3]);
}

/// Loss of one sample on its routed mode and the gradients of the readouts.
fn sample_gradients(
    theta: &PlannerParams,
    sample: &FitSample,
    command: &Command,
    weights: &LossWeights,
    store: &ParamStore,
    grads: &mut Gradients,
) -> Result<f64> {
    let m = command.class()?.index();
    let (curvature, speed) = mode_controls(&sample.feature, theta);
    let pred = rollout(curvature[m], speed);
    let (loss, g) = trajectory_loss_grad(&pred, &sample.future, weights);
    let (mut d_kappa, mut d_speed) = (0.0, 0.0);
    for k in 0..FUTURE_LEN {
        let t = waypoint_time(k);
        let p = arc_point(curvature[m], speed * t);
        d_kappa += g.0[k][0] * p.dx_dk + g.0[k][1] * p.dy_dk;
        d_speed += t * (g.0[k][0] * p.dx_ds + g.0[k][1] * p.dy_ds);
    }
    let e = &sample.feature.values;
    let d = e.cols();
    let mut gw = Matrix::zeros(d, NUM_MODES);
    let mut gb = Matrix::zeros(1, NUM_MODES);
    for i in 0..d {
        gw.set(i, m, d_kappa * e.get(0, i));
    }
    gb.set(0, m, d_kappa);
    let ids: Vec<_> = READOUTS.iter().map(|n| store.id_of(n).expect("readout present")).collect();
    grads.accumulate(ids[0], &gw)?;
    grads.accumulate(ids[1], &gb)?;
    grads.accumulate(ids[2], &e.transpose().scale(d_speed))?;
    grads.accumulate(ids[3], &Matrix::filled(1, 1, d_speed))?;
    Ok(loss)
}

/// Fits the readouts of `init` for `budget_steps` minibatch steps on the
/// routed mode under `settings.regime`, then tags the result with `stage`.
/// A zero budget returns `init` unchanged apart from the tag.
pub fn fit_unconditional(
    init: &PlannerParams,
    samples: &[FitSample],
    budget_steps: u64,
    settings: &FitSettings,
    stage: PlannerStage,
) -> Result<PlannerParams> {
    let mut theta = init.clone();
    theta.stage = stage;
    if budget_steps == 0 || samples.is_empty() {
        return Ok(theta);
    }
    settings.optimizer.validate()?;
    let mut store = readout_store(&theta);
    let mut optim = OptimState::new(settings.optimizer.clone(), budget_steps, &store);
    let per_epoch = steps_per_epoch(samples.len(), settings.batch_size);
    let mut batches = Vec::new();
    for step in 0..budget_steps {
        let epoch = step / per_epoch;
        if step % per_epoch == 0 {
            batches = epoch_batches(settings.seed, epoch, samples.len(), settings.batch_size);
        }
        let batch = &batches[(step % per_epoch) as usize];
        let mut grads = Gradients::new();
        for &i in batch {
            let s = &samples[i];
            let command = training_command(settings.seed, epoch, s.scene_id, s.lanelet_command, settings.regime);
            let loss = sample_gradients(&theta, s, &command, &settings.weights, &store, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite planner loss on scene {} at step {step}",
                    s.scene_id
                )));
            }
        }
        grads.scale(1.0 / batch.len() as f64);
        optim.step(&mut store, &grads)?;
        write_back(&mut theta, &store);
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_dataset, infer_lanelet_command, CommandConfig, GeneratorConfig};
    use crate::trajectory::CommandClass;

    fn theta() -> PlannerParams {
        PlannerParams::analytic(&PlannerConfig::default()).unwrap()
    }

    fn scenes(n: usize) -> Vec<Scene> {
        generate_dataset(11, n, &GeneratorConfig::default()).unwrap()
    }

    fn samples(scenes: &[Scene], theta: &PlannerParams) -> Vec<FitSample> {
        scenes
            .iter()
            .map(|s| FitSample {
                scene_id: s.id,
                feature: extract_ego_feature(s, theta).unwrap(),
                lanelet_command: infer_lanelet_command(&s.history, &s.lanelets, &CommandConfig::default()).unwrap(),
                future: s.future,
            })
            .collect()
    }

    fn settings(regime: Regime) -> FitSettings {
        FitSettings {
            optimizer: AdamWConfig {
                base_lr: 1e-3,
                ..AdamWConfig::default()
            },
            batch_size: 32,
            weights: LossWeights::default(),
            regime,
            seed: 5,
        }
    }

    fn mean_ade(theta: &PlannerParams, samples: &[FitSample]) -> f64 {
        samples
            .iter()
            .map(|s| {
                let pred = select_mode(&decode_modes(&s.feature, theta), &s.lanelet_command).unwrap();
                (0..FUTURE_LEN)
                    .map(|k| (pred.0[k][0] - s.future.0[k][0]).hypot(pred.0[k][1] - s.future.0[k][1]))
                    .sum::<f64>()
                    / FUTURE_LEN as f64
            })
            .sum::<f64>()
            / samples.len() as f64
    }

    #[test]
    fn stationary_history_has_zero_speed_features() {
        let d = descriptors(&[[0.0, 0.0]; 4], &[], &[4.0, 20.0]).unwrap();
        assert_eq!(&d[..4], &[0.0, 0.0, 0.0, 0.0]);
        let f = feature_from_parts(&[[0.0, 0.0]; 4], &[], &theta()).unwrap();
        assert_eq!(f.current_speed, 0.0);
    }

    #[test]
    fn short_history_is_a_feature_error() {
        assert!(matches!(descriptors(&[[0.0, 0.0]], &[], &[4.0]), Err(Error::Feature(_))));
    }

    #[test]
    fn features_are_deterministic_and_past_only() {
        let t = theta();
        for mut s in scenes(20) {
            let a = extract_ego_feature(&s, &t).unwrap();
            assert_eq!(a, extract_ego_feature(&s, &t).unwrap());
            s.future = Trajectory::from_fn(|k| [-(k as f64), 3.0]);
            assert_eq!(a, extract_ego_feature(&s, &t).unwrap());
        }
    }

    #[test]
    fn mirrored_scene_has_the_same_feature() {
        let t = theta();
        let flip = |p: &Point| [p[0], -p[1]];
        for s in scenes(30) {
            let history: Vec<Point> = s.history.iter().map(flip).collect();
            let lanelets: Vec<Vec<Point>> = s.lanelets.iter().map(|l| l.iter().map(flip).collect()).collect();
            let a = extract_ego_feature(&s, &t).unwrap();
            let b = feature_from_parts(&history, &lanelets, &t).unwrap();
            assert!(a.values.max_abs_diff(&b.values) < 1e-9, "scene {}", s.id);
        }
    }

    #[test]
    fn base_arcs_order_left_straight_right() {
        let t = theta();
        let f = feature_from_parts(&[[-6.0, 0.0], [-4.0, 0.0], [-2.0, 0.0], [0.0, 0.0]], &[], &t).unwrap();
        let modes = decode_modes(&f, &t);
        let y_end = |m: usize| modes.mode(m).0[FUTURE_LEN - 1][1];
        assert!(y_end(0) > 0.0);
        assert_eq!(y_end(1), 0.0);
        assert!(y_end(2) < 0.0);
        assert!(y_end(0) > y_end(1) && y_end(1) > y_end(2));
    }

    #[test]
    fn straight_mode_advances_half_speed_per_step() {
        let t = theta();
        let f = feature_from_parts(&[[-12.0, 0.0], [-8.0, 0.0], [-4.0, 0.0], [0.0, 0.0]], &[], &t).unwrap();
        assert!((f.current_speed - 8.0).abs() < 1e-12);
        let straight = select_mode(&decode_modes(&f, &t), &Command::one_hot(CommandClass::Straight)).unwrap();
        for k in 0..FUTURE_LEN {
            assert!((straight.0[k][0] - 8.0 * (k + 1) as f64 / 2.0).abs() < 1e-9);
        }
        assert_eq!(decode_modes(&f, &t), decode_modes(&f, &t));
    }

    #[test]
    fn select_mode_indexes_by_command() {
        let modes = ModeTrajectories([
            Trajectory::from_fn(|_| [1.0, 0.0]),
            Trajectory::from_fn(|_| [2.0, 0.0]),
            Trajectory::from_fn(|_| [3.0, 0.0]),
        ]);
        let straight = Command::one_hot(CommandClass::Straight);
        assert_eq!(select_mode(&modes, &straight).unwrap().0[0][0], 2.0);
        let swapped = ModeTrajectories([modes.0[2], modes.0[1], modes.0[0]]);
        assert_eq!(select_mode(&swapped, &straight).unwrap(), select_mode(&modes, &straight).unwrap());
        assert!(matches!(select_mode(&modes, &Command([1.0, 1.0, 0.0])), Err(Error::Command(_))));
    }

    #[test]
    fn readout_gradient_matches_finite_differences() {
        let t0 = theta();
        let scs = scenes(6);
        let ss = samples(&scs, &t0);
        let mut t = t0.clone();
        let mut rng = rng_for(&[1]);
        t.curvature_readout = Matrix::uniform(32, 3, 0.01, &mut rng);
        t.speed_readout = Matrix::uniform(32, 1, 0.1, &mut rng);
        let w = LossWeights::default();
        let loss_of = |t: &PlannerParams| -> f64 {
            ss.iter()
                .map(|s| {
                    let pred = select_mode(&decode_modes(&s.feature, t), &s.lanelet_command).unwrap();
                    crate::trainer::loss::trajectory_loss(&pred, &s.future, &w)
                })
                .sum()
        };
        let store = readout_store(&t);
        let mut grads = Gradients::new();
        for s in &ss {
            sample_gradients(&t, s, &s.lanelet_command, &w, &store, &mut grads).unwrap();
        }
        let h = 1e-7;
        for (name, i, j) in [("curvature_readout", 3, 0), ("curvature_readout", 7, 2), ("speed_readout", 5, 0), ("speed_bias", 0, 0)] {
            let id = store.id_of(name).unwrap();
            let mut plus = store.clone();
            let v = plus.get(id).get(i, j);
            plus.get_mut(id).set(i, j, v + h);
            let mut minus = store.clone();
            minus.get_mut(id).set(i, j, v - h);
            let (mut tp, mut tm) = (t.clone(), t.clone());
            write_back(&mut tp, &plus);
            write_back(&mut tm, &minus);
            let fd = (loss_of(&tp) - loss_of(&tm)) / (2.0 * h);
            let an = grads.get(id).map_or(0.0, |g| g.get(i, j));
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1.0), "{name}[{i},{j}] fd={fd} an={an}");
        }
    }

    #[test]
    fn zero_budget_returns_init() {
        let t = theta();
        let scs = scenes(10);
        let out = fit_unconditional(&t, &samples(&scs, &t), 0, &settings(Regime::Reliable), PlannerStage::Init).unwrap();
        assert_eq!(out.curvature_readout, t.curvature_readout);
        assert_eq!(out.speed_readout, t.speed_readout);
        assert_eq!(out.stage, PlannerStage::Init);
    }

    #[test]
    fn fitting_lowers_train_ade_and_depends_on_regime() {
        let t = theta();
        let scs = scenes(200);
        let ss = samples(&scs, &t);
        let reliable = fit_unconditional(&t, &ss, 200, &settings(Regime::Reliable), PlannerStage::Ft).unwrap();
        assert!(mean_ade(&reliable, &ss) <= mean_ade(&t, &ss));
        let random = fit_unconditional(&t, &ss, 200, &settings(Regime::Random), PlannerStage::Ft).unwrap();
        assert_ne!(reliable.hash(), random.hash());
    }
}
