//! The language residual: FiLM modulation of the frozen ego feature, a
//! residual MLP head over all modes, and the final routed prediction
//! `ŷ = (Ŷ₀ + Δ)[c]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Matrix, ParamId, ParamStore, Tape, Var};
use crate::planner::{decode_modes, extract_ego_feature, select_mode, EgoFeature, PlannerParams};
use crate::scenegen::{infer_lanelet_command, CommandConfig, Maneuver, Scene};
use crate::textenc::{encode, pool_and_project, tokenize, FrozenEmbedding, TextConfig, TextParams, TokenBatch};
use crate::trajectory::{Command, ModeTrajectories, Point, Trajectory, FUTURE_LEN, NUM_MODES};
use crate::util::rng_for;

/// Flattened residual width `3 · T_f · 2`.
pub const RESIDUAL_DIM: usize = NUM_MODES * FUTURE_LEN * 2;
const INIT_STREAM: u64 = 0x494e_4954;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Head over `[e, v]` with the small hidden width.
    PlainResidual,
    /// Head over `[e, v]` with the full hidden width.
    LargeMlp,
    /// FiLM-modulated `e` into the full-width head.
    Film,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::PlainResidual, Variant::LargeMlp, Variant::Film];

    pub fn label(self) -> &'static str {
        match self {
            Variant::PlainResidual => "plain-residual",
            Variant::LargeMlp => "large-mlp",
            Variant::Film => "film",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub variant: Variant,
    /// Head width `D_h` of the FiLM and large-MLP variants.
    pub hidden_dim: usize,
    /// Head width of the plain-residual variant.
    pub plain_hidden_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Film,
            hidden_dim: 128,
            plain_hidden_dim: 32,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::config("adapter.hidden_dim", "must be > 0"));
        }
        if self.plain_hidden_dim == 0 {
            return Err(Error::config("adapter.plain_hidden_dim", "must be > 0"));
        }
        Ok(())
    }

    pub fn hidden_for(&self, variant: Variant) -> usize {
        match variant {
            Variant::PlainResidual => self.plain_hidden_dim,
            Variant::LargeMlp | Variant::Film => self.hidden_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilmParams {
    pub w_gamma: ParamId,
    pub b_gamma: ParamId,
    pub w_beta: ParamId,
    pub b_beta: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// All trainable tensors φ of one adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub variant: Variant,
    pub store: ParamStore,
    pub text: TextParams,
    pub film: Option<FilmParams>,
    pub head: HeadParams,
}

impl AdapterParams {
    /// Identity initialization: zero FiLM weights with unit scale bias, zero
    /// output layer, zero low-rank `A`; the remaining weights are seeded.
    pub fn init_identity(
        config: &AdapterConfig,
        variant: Variant,
        text: &TextConfig,
        feature_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rng = rng_for(&[seed, INIT_STREAM]);
        let mut store = ParamStore::new();
        let text_params = TextParams::register(&mut store, text, feature_dim, &mut rng);
        let d = feature_dim;
        let film = (variant == Variant::Film).then(|| FilmParams {
            w_gamma: store.insert("film.w_gamma", Matrix::zeros(d, d)),
            b_gamma: store.insert("film.b_gamma", Matrix::filled(1, d, 1.0)),
            w_beta: store.insert("film.w_beta", Matrix::zeros(d, d)),
            b_beta: store.insert("film.b_beta", Matrix::zeros(1, d)),
        });
        let input = if variant == Variant::Film { d } else { 2 * d };
        let hidden = config.hidden_for(variant);
        let w1 = Matrix::uniform(input, hidden, 1.0 / (input as f64).sqrt(), &mut rng);
        let head = HeadParams {
            w1: store.insert("head.w1", w1),
            b1: store.insert("head.b1", Matrix::zeros(1, hidden)),
            ln_gain: store.insert("head.ln_gain", Matrix::filled(1, hidden, 1.0)),
            ln_bias: store.insert("head.ln_bias", Matrix::zeros(1, hidden)),
            w2: store.insert("head.w2", Matrix::zeros(hidden, RESIDUAL_DIM)),
            b2: store.insert("head.b2", Matrix::zeros(1, RESIDUAL_DIM)),
        };
        Self {
            variant,
            store,
            text: text_params,
            film,
            head,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.store.get(self.text.projection).cols()
    }

    /// Checks that the handles point at tensors of consistent shapes.
    pub fn validate(&self) -> Result<()> {
        let n = self.store.len();
        let mut ids = vec![self.text.lora_a, self.text.lora_b, self.text.projection];
        ids.extend([self.head.w1, self.head.b1, self.head.ln_gain, self.head.ln_bias, self.head.w2, self.head.b2]);
        if let Some(f) = self.film {
            ids.extend([f.w_gamma, f.b_gamma, f.w_beta, f.b_beta]);
        }
        if ids.iter().any(|id| id.0 >= n) {
            return Err(Error::Checkpoint("adapter tensor handle out of range".into()));
        }
        if self.film.is_some() != (self.variant == Variant::Film) {
            return Err(Error::Checkpoint("FiLM tensors do not match the variant".into()));
        }
        let d = self.feature_dim();
        let input = if self.variant == Variant::Film { d } else { 2 * d };
        let w1 = self.store.get(self.head.w1);
        if w1.rows() != input || self.store.get(self.head.w2).shape() != (w1.cols(), RESIDUAL_DIM) {
            return Err(Error::Checkpoint("head shapes do not match the variant".into()));
        }
        Ok(())
    }
}

/// `γ = v·W_γ + b_γ`, `β = v·W_β + b_β`, `ẽ = γ ⊙ e + β`.
pub fn film_modulate(tape: &mut Tape, e: Var, v: Var, store: &ParamStore, film: &FilmParams) -> Result<Var> {
    let wg = tape.param(film.w_gamma, store.get(film.w_gamma));
    let bg = tape.param(film.b_gamma, store.get(film.b_gamma));
    let wb = tape.param(film.w_beta, store.get(film.w_beta));
    let bb = tape.param(film.b_beta, store.get(film.b_beta));
    let vg = tape.matmul(v, wg)?;
    let gamma = tape.add_row(vg, bg)?;
    let vb = tape.matmul(v, wb)?;
    let beta = tape.add_row(vb, bb)?;
    let scaled = tape.mul(gamma, e)?;
    tape.add(scaled, beta)
}

/// `Δ = GELU(LN(x·W₁ + b₁))·W₂ + b₂`, a `1 × 72` row.
pub fn residual_head(tape: &mut Tape, x: Var, store: &ParamStore, head: &HeadParams) -> Result<Var> {
    let w1 = tape.param(head.w1, store.get(head.w1));
    let b1 = tape.param(head.b1, store.get(head.b1));
    let gain = tape.param(head.ln_gain, store.get(head.ln_gain));
    let bias = tape.param(head.ln_bias, store.get(head.ln_bias));
    let w2 = tape.param(head.w2, store.get(head.w2));
    let b2 = tape.param(head.b2, store.get(head.b2));
    let z = tape.matmul(x, w1)?;
    let z = tape.add_row(z, b1)?;
    let n = tape.layer_norm(z, gain, bias)?;
    let h = tape.gelu(n);
    let out = tape.matmul(h, w2)?;
    tape.add_row(out, b2)
}

/// Instruction vector `v`: the pooled projection for non-empty text, the
/// zero vector for the no-text pass or empty text.
pub fn instruction_vector(
    tape: &mut Tape,
    params: &AdapterParams,
    frozen: &FrozenEmbedding,
    tokens: Option<&TokenBatch>,
) -> Result<Var> {
    match tokens.filter(|t| !t.empty) {
        Some(t) => {
            let states = encode(tape, t, frozen, &params.store, &params.text)?;
            pool_and_project(tape, states, &t.mask, &params.store, &params.text)
        }
        None => Ok(tape.constant(Matrix::zeros(1, params.feature_dim()))),
    }
}

/// Records the residual computation on `tape` and returns `Δ` as `1 × 72`.
pub fn residual_on_tape(
    tape: &mut Tape,
    params: &AdapterParams,
    frozen: &FrozenEmbedding,
    feature: &Matrix,
    tokens: Option<&TokenBatch>,
) -> Result<Var> {
    if feature.shape() != (1, params.feature_dim()) {
        return Err(Error::shape(
            "adapter forward",
            format!("feature {:?}, adapter expects 1 × {}", feature.shape(), params.feature_dim()),
        ));
    }
    let v = instruction_vector(tape, params, frozen, tokens)?;
    let e = tape.constant(feature.clone());
    let x = match &params.film {
        Some(film) => film_modulate(tape, e, v, &params.store, film)?,
        None => tape.concat(e, v)?,
    };
    residual_head(tape, x, &params.store, &params.head)
}

pub fn residual(
    params: &AdapterParams,
    frozen: &FrozenEmbedding,
    feature: &Matrix,
    tokens: Option<&TokenBatch>,
) -> Result<ModeTrajectories> {
    let mut tape = Tape::new();
    let out = residual_on_tape(&mut tape, params, frozen, feature, tokens)?;
    ModeTrajectories::from_flat(tape.value(out).data())
}

/// Gradients of `Σ seed ⊙ Δ` with respect to every tensor of φ.
pub fn residual_gradients(
    params: &AdapterParams,
    frozen: &FrozenEmbedding,
    feature: &Matrix,
    tokens: Option<&TokenBatch>,
    seed: &Matrix,
) -> Result<Gradients> {
    let mut tape = Tape::new();
    let out = residual_on_tape(&mut tape, params, frozen, feature, tokens)?;
    tape.backward(out, seed)
}

/// Everything about a scene that is fixed while the adapter trains.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub id: u64,
    pub maneuver: Maneuver,
    pub instruction: String,
    pub history: Vec<Point>,
    pub feature: EgoFeature,
    /// `Ŷ₀` of the frozen planner.
    pub base: ModeTrajectories,
    pub lanelet_command: Command,
    pub tokens: TokenBatch,
    pub future: Trajectory,
}

pub fn prepare_scene(
    scene: &Scene,
    theta: &PlannerParams,
    text: &TextConfig,
    command: &CommandConfig,
) -> Result<PreparedScene> {
    let feature = extract_ego_feature(scene, theta)?;
    let base = decode_modes(&feature, theta);
    Ok(PreparedScene {
        id: scene.id,
        maneuver: scene.maneuver,
        instruction: scene.instruction.clone(),
        history: scene.history.clone(),
        lanelet_command: infer_lanelet_command(&scene.history, &scene.lanelets, command)?,
        tokens: tokenize(&scene.instruction, text),
        feature,
        base,
        future: scene.future,
    })
}

pub fn prepare_scenes(
    scenes: &[Scene],
    theta: &PlannerParams,
    text: &TextConfig,
    command: &CommandConfig,
) -> Result<Vec<PreparedScene>> {
    scenes.iter().map(|s| prepare_scene(s, theta, text, command)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `ŷ = Ŷ₀[c] + Δ[c]`.
    pub trajectory: Trajectory,
    /// `ŷ₀ = Ŷ₀[c]`.
    pub planner: Trajectory,
    pub residual: ModeTrajectories,
    pub used_text: bool,
}

/// Routed prediction for a prepared scene; `with_text = false` is the
/// no-text pass (`v = 0`).
pub fn predict(
    params: &AdapterParams,
    frozen: &FrozenEmbedding,
    scene: &PreparedScene,
    command: &Command,
    with_text: bool,
) -> Result<Prediction> {
    let tokens = with_text.then_some(&scene.tokens);
    let delta = residual(params, frozen, &scene.feature.values, tokens)?;
    let m = command.class()?.index();
    let planner = *scene.base.mode(m);
    Ok(Prediction {
        trajectory: planner.add(delta.mode(m)),
        planner,
        residual: delta,
        used_text: tokens.is_some_and(|t| !t.empty),
    })
}

/// End-to-end forward from a raw scene and optional instruction text.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    scene: &Scene,
    command: &Command,
    text: Option<&str>,
    params: &AdapterParams,
    frozen: &FrozenEmbedding,
    text_config: &TextConfig,
    theta: &PlannerParams,
) -> Result<Prediction> {
    let feature = extract_ego_feature(scene, theta)?;
    let base = decode_modes(&feature, theta);
    let tokens = text.map(|t| tokenize(t, text_config));
    let delta = residual(params, frozen, &feature.values, tokens.as_ref())?;
    let planner = select_mode(&base, command)?;
    let m = command.class()?.index();
    Ok(Prediction {
        trajectory: planner.add(delta.mode(m)),
        planner,
        residual: delta,
        used_text: tokens.as_ref().is_some_and(|t| !t.empty),
    })
}
