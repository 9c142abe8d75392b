//! Displacement metrics, the with/without-text comparison, the conservative
//! stop override and tabular reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{predict, AdapterParams, PreparedScene};
use crate::error::{Error, Result};
use crate::scenegen::{mean_speed, Regime};
use crate::textenc::{words, FrozenEmbedding};
use crate::trainer::eval_command;
use crate::trajectory::{Command, ModeTrajectories, Point, Trajectory, DT, FUTURE_LEN};

pub const HORIZONS: usize = 6;

fn displacements(pred: &Trajectory, target: &Trajectory) -> [f64; FUTURE_LEN] {
    let mut d = [0.0; FUTURE_LEN];
    for (k, v) in d.iter_mut().enumerate() {
        *v = (pred.0[k][0] - target.0[k][0]).hypot(pred.0[k][1] - target.0[k][1]);
    }
    d
}

/// Mean Euclidean displacement over all waypoints.
pub fn ade(pred: &Trajectory, target: &Trajectory) -> f64 {
    displacements(pred, target).iter().sum::<f64>() / FUTURE_LEN as f64
}

/// Displacement at the final waypoint.
pub fn fde(pred: &Trajectory, target: &Trajectory) -> f64 {
    displacements(pred, target)[FUTURE_LEN - 1]
}

/// Mean displacement over the waypoints up to `seconds` (1..=6).
pub fn a_at(pred: &Trajectory, target: &Trajectory, seconds: usize) -> Result<f64> {
    let n = (seconds as f64 / DT).round() as usize;
    if seconds == 0 || n > FUTURE_LEN {
        return Err(Error::shape("a_at", format!("horizon {seconds} s outside 1..={HORIZONS}")));
    }
    Ok(displacements(pred, target)[..n].iter().sum::<f64>() / n as f64)
}

/// All horizon metrics of one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ade: f64,
    pub fde: f64,
    pub a_at: [f64; HORIZONS],
}

impl Metrics {
    pub fn of(pred: &Trajectory, target: &Trajectory) -> Self {
        let d = displacements(pred, target);
        let mut a = [0.0; HORIZONS];
        for (i, v) in a.iter_mut().enumerate() {
            let n = 2 * (i + 1);
            *v = d[..n].iter().sum::<f64>() / n as f64;
        }
        Self {
            ade: d.iter().sum::<f64>() / FUTURE_LEN as f64,
            fde: d[FUTURE_LEN - 1],
            a_at: a,
        }
    }

    /// Arithmetic mean in scene order.
    pub fn mean(items: &[Metrics]) -> Self {
        let mut out = Metrics::default();
        if items.is_empty() {
            return out;
        }
        for m in items {
            out.ade += m.ade;
            out.fde += m.fde;
            for i in 0..HORIZONS {
                out.a_at[i] += m.a_at[i];
            }
        }
        let n = items.len() as f64;
        out.ade /= n;
        out.fde /= n;
        for v in &mut out.a_at {
            *v /= n;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverrideOutput {
    /// Stay at the origin.
    Hold,
    /// Decelerate straight ahead from the current speed to rest.
    Ramp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopRule {
    pub hard_stop: Vec<String>,
    pub conflict_verbs: Vec<String>,
    pub conflict_phrases: Vec<String>,
    pub max_words: usize,
    /// Mean history speed limit, m/s.
    pub max_speed: f64,
    pub output: OverrideOutput,
    /// Time to come to rest for the ramp output, s.
    pub ramp_time: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|w| w.to_string()).collect();
        Self {
            hard_stop: s(&["stop", "halt", "pull over", "brake"]),
            conflict_verbs: s(&["turn", "follow", "pass", "continue", "merge", "overtake"]),
            conflict_phrases: s(&["stop sign", "bus stop", "stop light"]),
            max_words: 12,
            max_speed: 2.0,
            output: OverrideOutput::Hold,
            ramp_time: 3.0,
        }
    }
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        if self.hard_stop.is_empty() {
            return Err(Error::config("eval.stop_rule.hard_stop", "must not be empty"));
        }
        if !(self.max_speed.is_finite() && self.max_speed >= 0.0) {
            return Err(Error::config("eval.stop_rule.max_speed", "must be >= 0"));
        }
        if !(self.ramp_time.is_finite() && self.ramp_time > 0.0) {
            return Err(Error::config("eval.stop_rule.ramp_time", "must be > 0"));
        }
        Ok(())
    }
}

/// Whether a lexicon entry (one or more words) occurs as a contiguous run
/// of `tokens`.
fn contains_phrase(tokens: &[String], phrase: &str) -> bool {
    let p: Vec<String> = words(phrase);
    !p.is_empty() && tokens.windows(p.len()).any(|w| w == p.as_slice())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverrideDecision {
    pub fired: bool,
    pub reason: String,
    pub word_count: usize,
    pub history_speed: f64,
}

/// Checks the four conditions in order and reports the first that fails.
pub fn stop_decision(rule: &StopRule, instruction: &str, history: &[Point]) -> OverrideDecision {
    let tokens = words(instruction);
    let speed = mean_speed(history);
    let decision = |fired: bool, reason: String| OverrideDecision {
        fired,
        reason,
        word_count: tokens.len(),
        history_speed: speed,
    };
    let Some(cue) = rule.hard_stop.iter().find(|c| contains_phrase(&tokens, c)) else {
        return decision(false, "no hard-stop cue".into());
    };
    if let Some(p) = rule.conflict_phrases.iter().find(|p| contains_phrase(&tokens, p)) {
        return decision(false, format!("stop-related noun phrase `{p}`"));
    }
    if let Some(v) = rule.conflict_verbs.iter().find(|v| contains_phrase(&tokens, v)) {
        return decision(false, format!("conflicting action `{v}`"));
    }
    if tokens.len() > rule.max_words {
        return decision(false, format!("{} words > {}", tokens.len(), rule.max_words));
    }
    if speed > rule.max_speed {
        return decision(false, format!("history speed {speed:.2} m/s > {}", rule.max_speed));
    }
    decision(true, format!("hard-stop cue `{cue}`"))
}

fn override_trajectory(rule: &StopRule, history: &[Point]) -> Trajectory {
    match rule.output {
        OverrideOutput::Hold => Trajectory::zeros(),
        OverrideOutput::Ramp => {
            let n = history.len();
            let v = if n >= 2 {
                (history[n - 1][0] - history[n - 2][0]).hypot(history[n - 1][1] - history[n - 2][1]) / DT
            } else {
                0.0
            };
            let tr = rule.ramp_time;
            Trajectory::from_fn(|k| {
                let t = ((k + 1) as f64 * DT).min(tr);
                [v * t - v * t * t / (2.0 * tr), 0.0]
            })
        }
    }
}

/// Replaces `pred` when text and motion both indicate stopping.
pub fn stop_override(rule: &StopRule, instruction: &str, history: &[Point], pred: &Trajectory) -> (Trajectory, OverrideDecision) {
    let d = stop_decision(rule, instruction, history);
    let out = if d.fired { override_trajectory(rule, history) } else { *pred };
    (out, d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub method: String,
    pub scene_id: u64,
    pub fired: bool,
    pub reason: String,
}

/// Per-scene output kept for trajectory dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneOutput {
    pub scene_id: u64,
    pub command: Command,
    /// `Ŷ₀ + Δ` over all modes.
    pub modes: ModeTrajectories,
    pub selected: Trajectory,
    pub residual: ModeTrajectories,
}

/// Evaluation of one method on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodEval {
    pub method: String,
    pub metrics: Metrics,
    /// Metrics of the no-text pass when the method has one.
    pub no_text: Option<Metrics>,
    pub audit: Vec<AuditEntry>,
    pub outputs: Vec<SceneOutput>,
    /// Commands used for each scene, per pass, in scene order.
    pub commands: Vec<Command>,
    pub no_text_commands: Vec<Command>,
}

impl MethodEval {
    pub fn delta_ade(&self) -> Option<f64> {
        self.no_text.map(|n| n.ade - self.metrics.ade)
    }
}

/// The frozen planner alone, routed by the evaluation commands.
pub fn evaluate_planner(method: &str, scenes: &[PreparedScene], regime: Regime, seed: u64) -> Result<MethodEval> {
    let mut metrics = Vec::with_capacity(scenes.len());
    let mut outputs = Vec::with_capacity(scenes.len());
    let mut commands = Vec::with_capacity(scenes.len());
    for s in scenes {
        let c = eval_command(seed, s.id, s.lanelet_command, regime);
        let pred = *s.base.mode(c.class()?.index());
        metrics.push(Metrics::of(&pred, &s.future));
        outputs.push(SceneOutput {
            scene_id: s.id,
            command: c,
            modes: s.base,
            selected: pred,
            residual: ModeTrajectories::zeros(),
        });
        commands.push(c);
    }
    Ok(MethodEval {
        method: method.to_string(),
        metrics: Metrics::mean(&metrics),
        no_text: None,
        audit: Vec::new(),
        outputs,
        commands,
        no_text_commands: Vec::new(),
    })
}

/// Options for evaluating an adapter.
#[derive(Clone, Copy, Debug)]
pub struct AdapterEvalOptions<'a> {
    pub regime: Regime,
    pub seed: u64,
    /// Also run the no-text pass with the same commands.
    pub both_passes: bool,
    /// Feed the instruction in the primary pass; `false` evaluates the
    /// no-text pass alone.
    pub text: bool,
    pub stop_rule: Option<&'a StopRule>,
}

pub fn evaluate_adapter(
    method: &str,
    params: &AdapterParams,
    frozen: &FrozenEmbedding,
    scenes: &[PreparedScene],
    options: AdapterEvalOptions<'_>,
) -> Result<MethodEval> {
    let mut primary = Vec::with_capacity(scenes.len());
    let mut secondary = Vec::new();
    let mut outputs = Vec::with_capacity(scenes.len());
    let mut audit = Vec::new();
    let mut commands = Vec::with_capacity(scenes.len());
    let mut no_text_commands = Vec::new();
    for s in scenes {
        let c = eval_command(options.seed, s.id, s.lanelet_command, options.regime);
        let p = predict(params, frozen, s, &c, options.text)?;
        let mut selected = p.trajectory;
        if let Some(rule) = options.stop_rule {
            let (out, d) = stop_override(rule, &s.instruction, &s.history, &selected);
            selected = out;
            audit.push(AuditEntry {
                method: method.to_string(),
                scene_id: s.id,
                fired: d.fired,
                reason: d.reason,
            });
        }
        primary.push(Metrics::of(&selected, &s.future));
        commands.push(c);
        if options.both_passes {
            let q = predict(params, frozen, s, &c, !options.text)?;
            secondary.push(Metrics::of(&q.trajectory, &s.future));
            no_text_commands.push(c);
        }
        outputs.push(SceneOutput {
            scene_id: s.id,
            command: c,
            modes: s.base.add(&p.residual),
            selected,
            residual: p.residual,
        });
    }
    let metrics = Metrics::mean(&primary);
    let no_text = (options.text && options.both_passes).then(|| Metrics::mean(&secondary));
    Ok(MethodEval {
        method: method.to_string(),
        metrics,
        no_text,
        audit,
        outputs,
        commands,
        no_text_commands,
    })
}

/// `ADE_no-text − ADE_with-text` with one shared command per scene.
pub fn delta_ade(
    params: &AdapterParams,
    frozen: &FrozenEmbedding,
    scenes: &[PreparedScene],
    regime: Regime,
    seed: u64,
) -> Result<f64> {
    let eval = evaluate_adapter(
        "delta",
        params,
        frozen,
        scenes,
        AdapterEvalOptions {
            regime,
            seed,
            both_passes: true,
            text: true,
            stop_rule: None,
        },
    )?;
    Ok(eval.delta_ade().expect("both passes were run"))
}

/// One line of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub regime: Regime,
    pub ade: f64,
    pub fde: f64,
    pub a_at: [f64; HORIZONS],
    pub delta_ade: Option<f64>,
    pub gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub title: String,
    pub regime: Regime,
    pub seed: u64,
    pub config_hash: String,
    /// Method the gain column is measured against.
    pub gain_reference: String,
    /// Hash of every checkpoint the rows were computed from.
    pub checkpoints: BTreeMap<String, String>,
    pub rows: Vec<ReportRow>,
    pub audit: Vec<AuditEntry>,
}

pub struct ReportLayout<'a> {
    pub title: &'a str,
    pub regime: Regime,
    pub seed: u64,
    pub config_hash: &'a str,
    pub gain_reference: &'a str,
    /// Methods whose gain is reported; others get an empty gain cell.
    pub gain_rows: &'a [&'a str],
    pub checkpoints: BTreeMap<String, String>,
}

/// Assembles rows in the order given; the gain of a row is the reference
/// row's ADE (= a@6s) minus its own.
pub fn build_report(layout: ReportLayout<'_>, evals: &[MethodEval]) -> Result<EvalReport> {
    let reference = evals
        .iter()
        .find(|e| e.method == layout.gain_reference)
        .ok_or_else(|| Error::Report {
            method: layout.gain_reference.to_string(),
            reason: "gain reference was not evaluated".into(),
        })?
        .metrics
        .ade;
    for name in layout.gain_rows {
        if !evals.iter().any(|e| e.method == *name) {
            return Err(Error::Report {
                method: name.to_string(),
                reason: "method missing from the evaluation".into(),
            });
        }
    }
    let rows = evals
        .iter()
        .map(|e| ReportRow {
            method: e.method.clone(),
            regime: layout.regime,
            ade: e.metrics.ade,
            fde: e.metrics.fde,
            a_at: e.metrics.a_at,
            delta_ade: e.delta_ade(),
            gain: layout.gain_rows.contains(&e.method.as_str()).then_some(reference - e.metrics.ade),
        })
        .collect();
    Ok(EvalReport {
        title: layout.title.to_string(),
        regime: layout.regime,
        seed: layout.seed,
        config_hash: layout.config_hash.to_string(),
        gain_reference: layout.gain_reference.to_string(),
        checkpoints: layout.checkpoints,
        rows,
        audit: evals.iter().flat_map(|e| e.audit.iter().cloned()).collect(),
    })
}

pub const CSV_HEADER: [&str; 12] = [
    "method", "regime", "ADE", "FDE", "a@1s", "a@2s", "a@3s", "a@4s", "a@5s", "a@6s", "dADE", "gain",
];

fn regime_label(r: Regime) -> &'static str {
    match r {
        Regime::Reliable => "reliable",
        Regime::Random => "random",
    }
}

fn report_err(reason: impl Into<String>) -> Error {
    Error::Report {
        method: "csv".into(),
        reason: reason.into(),
    }
}

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(|e| report_err(e.to_string()))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec = vec![r.method.clone(), regime_label(r.regime).to_string(), r.ade.to_string(), r.fde.to_string()];
        rec.extend(r.a_at.iter().map(f64::to_string));
        rec.push(opt(r.delta_ade));
        rec.push(opt(r.gain));
        w.write_record(&rec).map_err(|e| report_err(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| report_err(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| report_err(e.to_string()))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| report_err(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(report_err("unexpected header"));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| report_err(format!("`{s}`: {e}")));
    let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| report_err(e.to_string()))?;
        let regime = match &rec[1] {
            "reliable" => Regime::Reliable,
            "random" => Regime::Random,
            other => return Err(report_err(format!("unknown regime `{other}`"))),
        };
        let mut a = [0.0; HORIZONS];
        for (i, v) in a.iter_mut().enumerate() {
            *v = num(&rec[4 + i])?;
        }
        rows.push(ReportRow {
            method: rec[0].to_string(),
            regime,
            ade: num(&rec[2])?,
            fde: num(&rec[3])?,
            a_at: a,
            delta_ade: opt(&rec[10])?,
            gain: opt(&rec[11])?,
        });
    }
    Ok(rows)
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    method: &'a str,
    #[serde(flatten)]
    output: &'a SceneOutput,
}

/// One JSON line per (method, scene) with the mode trajectories, the
/// selected trajectory and the residual.
pub fn trajectory_dump(evals: &[MethodEval]) -> Result<String> {
    let mut out = String::new();
    for e in evals {
        for o in &e.outputs {
            out.push_str(&serde_json::to_string(&DumpRecord {
                method: &e.method,
                output: o,
            })?);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Fixed-width text table with three decimals.
pub fn pretty_table(report: &EvalReport) -> String {
    let width = report.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{} ({} commands)\n", report.title, regime_label(report.regime));
    out.push_str(&format!("{:<width$}", "method"));
    for h in &CSV_HEADER[2..] {
        out.push_str(&format!(" {h:>7}"));
    }
    out.push('\n');
    let cell = |v: Option<f64>| v.map_or_else(|| format!(" {:>7}", "-"), |x| format!(" {x:>7.3}"));
    for r in &report.rows {
        out.push_str(&format!("{:<width$}", r.method));
        out.push_str(&cell(Some(r.ade)));
        out.push_str(&cell(Some(r.fde)));
        for a in r.a_at {
            out.push_str(&cell(Some(a)));
        }
        out.push_str(&cell(r.delta_ade));
        out.push_str(&cell(r.gain));
        out.push('\n');
    }
    out
}
