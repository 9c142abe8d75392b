//! End-to-end runs: baselines, adapters and the two report tables.

use std::collections::BTreeMap;

use crate::adapter::{prepare_scenes, AdapterParams, PreparedScene, Variant};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluator::{
    build_report, evaluate_adapter, evaluate_planner, AdapterEvalOptions, EvalReport, MethodEval, ReportLayout,
};
use crate::planner::{PlannerParams, PlannerStage};
use crate::scenegen::{Regime, Scene, Split};
use crate::textenc::FrozenEmbedding;
use crate::trainer::{train_adapter, train_baselines, Baselines, Checkpoint, TrainInputs, TrainOutcome};
use crate::util::stable_hash;

pub const VAD_STAGE1: &str = "VAD-Stage1";
pub const VAD_INIT: &str = "VAD-Init";
pub const VAD_FT: &str = "VAD-FT (Uncond)";
pub const NUDGE_ON_INIT: &str = "NudgeVAD on VAD-Init";
pub const NUDGE_ON_FT: &str = "NudgeVAD on VAD-FT";
pub const NUDGE_NO_TEXT: &str = "NudgeVAD, w/o text";
pub const NUDGE_TEXT: &str = "NudgeVAD, w/ text";

pub const ABLATION_BASE: &str = "Stage1 (no cmd)";
pub const ABLATION_PLAIN: &str = "Plain text residual";
pub const ABLATION_LARGE: &str = "Large residual MLP";
pub const ABLATION_FILM: &str = "NudgeVAD (FiLM)";
pub const ABLATION_STOP: &str = "+ Stop override";

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

impl Splits {
    pub fn new(scenes: Vec<Scene>) -> Result<Self> {
        let (train, val): (Vec<_>, Vec<_>) = scenes.into_iter().partition(|s| s.split == Split::Train);
        if train.is_empty() {
            return Err(Error::config("data.n_scenes", "no training scenes"));
        }
        if val.is_empty() {
            return Err(Error::config("generator.val_fraction", "no validation scenes"));
        }
        Ok(Self { train, val })
    }
}

/// Planner stages that carry an adapter under `regime`.
pub fn adapter_bases(regime: Regime) -> Vec<PlannerStage> {
    match regime {
        Regime::Reliable => vec![PlannerStage::Init, PlannerStage::Ft],
        Regime::Random => vec![PlannerStage::Stage1],
    }
}

#[derive(Clone, Debug)]
pub struct AdapterRun {
    pub base: PlannerStage,
    pub variant: Variant,
    pub outcome: TrainOutcome,
}

impl AdapterRun {
    pub fn file_stem(&self) -> String {
        adapter_stem(self.base, self.variant)
    }
}

pub fn adapter_stem(base: PlannerStage, variant: Variant) -> String {
    format!("adapter-{}-{}", base.label().to_lowercase(), variant.label())
}

#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub baselines: Baselines,
    pub adapters: Vec<AdapterRun>,
}

impl TrainedModels {
    pub fn adapter(&self, base: PlannerStage, variant: Variant) -> Result<&AdapterRun> {
        self.adapters
            .iter()
            .find(|a| a.base == base && a.variant == variant)
            .ok_or_else(|| Error::Report {
                method: adapter_stem(base, variant),
                reason: "checkpoint not available".into(),
            })
    }
}

/// Training and validation scenes prepared against one planner.
pub struct PreparedSplits {
    pub train: Vec<PreparedScene>,
    pub val: Vec<PreparedScene>,
}

pub fn prepare(config: &RunConfig, splits: &Splits, theta: &PlannerParams) -> Result<PreparedSplits> {
    Ok(PreparedSplits {
        train: prepare_scenes(&splits.train, theta, &config.text, &config.command)?,
        val: prepare_scenes(&splits.val, theta, &config.text, &config.command)?,
    })
}

pub fn identity_adapter(config: &RunConfig, variant: Variant) -> AdapterParams {
    AdapterParams::init_identity(&config.adapter, variant, &config.text, config.planner.feature_dim, config.train.seed)
}

/// Trains one adapter over `theta`, optionally resuming and stopping early.
pub fn train_one(
    config: &RunConfig,
    prepared: &PreparedSplits,
    theta: &PlannerParams,
    variant: Variant,
    resume: Option<Checkpoint>,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    let frozen = FrozenEmbedding::new(&config.text);
    let planner_hash = theta.hash();
    let config_hash = config.model_hash();
    let inputs = TrainInputs {
        train: &prepared.train,
        val: &prepared.val,
        frozen: &frozen,
        planner_hash: &planner_hash,
        config_hash: &config_hash,
    };
    train_adapter(&inputs, identity_adapter(config, variant), &config.train, resume, stop_after)
}

/// Runs `jobs` in order, or on scoped threads when `parallel` is set.
/// Results come back in job order either way.
fn run_jobs<T: Send>(jobs: Vec<Box<dyn FnOnce() -> Result<T> + Send + '_>>, parallel: bool) -> Result<Vec<T>> {
    if !parallel {
        return jobs.into_iter().map(|j| j()).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs.into_iter().map(|j| s.spawn(j)).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}

/// Fits the planner baselines, then one adapter per base stage of the
/// active regime and per requested variant.
pub fn train_models(config: &RunConfig, splits: &Splits, variants: &[Variant], parallel: bool) -> Result<TrainedModels> {
    let regime = config.train.regime;
    let baselines = train_baselines(&splits.train, &config.planner, &config.command, &config.train, regime)?;
    let bases = adapter_bases(regime);
    let prepared = bases
        .iter()
        .map(|&b| prepare(config, splits, baselines.get(b)))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs: Vec<Box<dyn FnOnce() -> Result<AdapterRun> + Send + '_>> = Vec::new();
    for (i, &base) in bases.iter().enumerate() {
        for &variant in variants {
            let prepared = &prepared[i];
            let theta = baselines.get(base);
            jobs.push(Box::new(move || {
                Ok(AdapterRun {
                    base,
                    variant,
                    outcome: train_one(config, prepared, theta, variant, None, None)?,
                })
            }));
        }
    }
    let adapters = run_jobs(jobs, parallel)?;
    Ok(TrainedModels { baselines, adapters })
}

fn renamed(mut eval: MethodEval, method: &str) -> MethodEval {
    eval.method = method.to_string();
    for a in &mut eval.audit {
        a.method = method.to_string();
    }
    eval
}

/// The no-text pass of a two-pass evaluation as its own row.
fn no_text_row(eval: &MethodEval, method: &str) -> MethodEval {
    MethodEval {
        method: method.to_string(),
        metrics: eval.no_text.expect("two-pass evaluation"),
        no_text: None,
        audit: Vec::new(),
        outputs: Vec::new(),
        commands: eval.no_text_commands.clone(),
        no_text_commands: Vec::new(),
    }
}

fn eval_adapter(
    config: &RunConfig,
    run: &AdapterRun,
    method: &str,
    val: &[PreparedScene],
    regime: Regime,
    stop_override: bool,
) -> Result<MethodEval> {
    let frozen = FrozenEmbedding::new(&config.text);
    let e = evaluate_adapter(
        method,
        &run.outcome.checkpoint.params,
        &frozen,
        val,
        AdapterEvalOptions {
            regime,
            seed: config.eval.seed,
            both_passes: true,
            text: true,
            stop_rule: stop_override.then_some(&config.eval.stop_rule),
        },
    )?;
    Ok(renamed(e, method))
}

/// The command-reliability comparison for the configured regime.
pub fn comparison_report(config: &RunConfig, splits: &Splits, models: &TrainedModels) -> Result<(EvalReport, Vec<MethodEval>)> {
    let regime = config.train.regime;
    let seed = config.eval.seed;
    let variant = config.adapter.variant;
    let b = &models.baselines;
    let val_on = |theta: &PlannerParams| prepare_scenes(&splits.val, theta, &config.text, &config.command);
    let ck_hash = |r: &AdapterRun| stable_hash(&r.outcome.checkpoint);
    let mut checkpoints = BTreeMap::new();
    let (evals, gain_rows): (Vec<MethodEval>, Vec<&str>) = match regime {
        Regime::Reliable => {
            let v_init = val_on(&b.init)?;
            let v_ft = val_on(&b.ft)?;
            let on_init = models.adapter(PlannerStage::Init, variant)?;
            let on_ft = models.adapter(PlannerStage::Ft, variant)?;
            checkpoints.insert(VAD_INIT.to_string(), b.init.hash());
            checkpoints.insert(VAD_FT.to_string(), b.ft.hash());
            checkpoints.insert(NUDGE_ON_INIT.to_string(), ck_hash(on_init));
            checkpoints.insert(NUDGE_ON_FT.to_string(), ck_hash(on_ft));
            let so = config.eval.stop_override;
            (
                vec![
                    evaluate_planner(VAD_INIT, &v_init, regime, seed)?,
                    eval_adapter(config, on_init, NUDGE_ON_INIT, &v_init, regime, so)?,
                    evaluate_planner(VAD_FT, &v_ft, regime, seed)?,
                    eval_adapter(config, on_ft, NUDGE_ON_FT, &v_ft, regime, so)?,
                ],
                vec![NUDGE_ON_INIT, NUDGE_ON_FT],
            )
        }
        Regime::Random => {
            let v_s1 = val_on(&b.stage1)?;
            let v_ft = val_on(&b.ft)?;
            let run = models.adapter(PlannerStage::Stage1, variant)?;
            checkpoints.insert(VAD_STAGE1.to_string(), b.stage1.hash());
            checkpoints.insert(VAD_FT.to_string(), b.ft.hash());
            checkpoints.insert(NUDGE_TEXT.to_string(), ck_hash(run));
            checkpoints.insert(NUDGE_NO_TEXT.to_string(), ck_hash(run));
            let with = eval_adapter(config, run, NUDGE_TEXT, &v_s1, regime, config.eval.stop_override)?;
            (
                vec![
                    evaluate_planner(VAD_STAGE1, &v_s1, regime, seed)?,
                    evaluate_planner(VAD_FT, &v_ft, regime, seed)?,
                    no_text_row(&with, NUDGE_NO_TEXT),
                    with,
                ],
                vec![NUDGE_NO_TEXT, NUDGE_TEXT],
            )
        }
    };
    let hash = config.hash();
    let report = build_report(
        ReportLayout {
            title: "Command-reliability comparison",
            regime,
            seed,
            config_hash: &hash,
            gain_reference: VAD_FT,
            gain_rows: &gain_rows,
            checkpoints,
        },
        &evals,
    )?;
    Ok((report, evals))
}

/// `config` with the random regime forced, as the ablation requires.
pub fn ablation_config(config: &RunConfig) -> RunConfig {
    let mut c = config.clone();
    c.train.regime = Regime::Random;
    c
}

/// The adapter progression under random routing. `config` must already be
/// the ablation config.
pub fn ablation_report(config: &RunConfig, splits: &Splits, models: &TrainedModels) -> Result<(EvalReport, Vec<MethodEval>)> {
    let regime = Regime::Random;
    let seed = config.eval.seed;
    let b = &models.baselines;
    let v_s1 = prepare_scenes(&splits.val, &b.stage1, &config.text, &config.command)?;
    let v_ft = prepare_scenes(&splits.val, &b.ft, &config.text, &config.command)?;
    let mut checkpoints = BTreeMap::new();
    checkpoints.insert(ABLATION_BASE.to_string(), b.stage1.hash());
    checkpoints.insert(VAD_FT.to_string(), b.ft.hash());
    let mut evals = vec![
        evaluate_planner(ABLATION_BASE, &v_s1, regime, seed)?,
        evaluate_planner(VAD_FT, &v_ft, regime, seed)?,
    ];
    for (variant, name) in [
        (Variant::PlainResidual, ABLATION_PLAIN),
        (Variant::LargeMlp, ABLATION_LARGE),
        (Variant::Film, ABLATION_FILM),
    ] {
        let run = models.adapter(PlannerStage::Stage1, variant)?;
        checkpoints.insert(name.to_string(), stable_hash(&run.outcome.checkpoint));
        evals.push(eval_adapter(config, run, name, &v_s1, regime, false)?);
    }
    let film = models.adapter(PlannerStage::Stage1, Variant::Film)?;
    checkpoints.insert(ABLATION_STOP.to_string(), stable_hash(&film.outcome.checkpoint));
    evals.push(eval_adapter(config, film, ABLATION_STOP, &v_s1, regime, true)?);

    let hash = config.hash();
    let names: Vec<&str> = evals.iter().map(|e| e.method.as_str()).collect();
    let report = build_report(
        ReportLayout {
            title: "Adapter progression under random command routing",
            regime,
            seed,
            config_hash: &hash,
            gain_reference: ABLATION_BASE,
            gain_rows: &names,
            checkpoints,
        },
        &evals,
    )?;
    Ok((report, evals))
}

pub struct AblationRun {
    pub config: RunConfig,
    pub models: TrainedModels,
    pub report: EvalReport,
    pub evals: Vec<MethodEval>,
}

pub fn run_ablation(config: &RunConfig, splits: &Splits, parallel: bool) -> Result<AblationRun> {
    let config = ablation_config(config);
    let models = train_models(&config, splits, &Variant::ALL, parallel)?;
    let (report, evals) = ablation_report(&config, splits, &models)?;
    Ok(AblationRun {
        config,
        models,
        report,
        evals,
    })
}
