//! The run configuration: one TOML file holding every knob, with
//! `key=value` overrides and canonical hashes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::error::{Error, Result};
use crate::evaluator::StopRule;
use crate::planner::PlannerConfig;
use crate::scenegen::{CommandConfig, GeneratorConfig};
use crate::textenc::TextConfig;
use crate::trainer::TrainConfig;
use crate::util::stable_hash;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_scenes: usize,
    /// Dataset file read by `train`, `eval` and `ablate`.
    pub path: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_scenes: 1000,
            path: PathBuf::from("runs/scenes.jsonl"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Seed of the evaluation command stream.
    pub seed: u64,
    /// Apply the stop override to NudgeVAD rows of the comparison table.
    pub stop_override: bool,
    pub stop_rule: StopRule,
    /// Write per-scene trajectories next to the report.
    pub dump_trajectories: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 99,
            stop_override: false,
            stop_rule: StopRule::default(),
            dump_trajectories: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub out_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub command: CommandConfig,
    pub planner: PlannerConfig,
    pub text: TextConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

/// The parts of a config that determine trained weights.
#[derive(Serialize)]
struct ModelView<'a> {
    data_seed: u64,
    n_scenes: usize,
    generator: &'a GeneratorConfig,
    command: &'a CommandConfig,
    planner: &'a PlannerConfig,
    text: &'a TextConfig,
    adapter: &'a AdapterConfig,
    train: &'a TrainConfig,
}

fn parse_err(source: &str, e: impl std::fmt::Display) -> Error {
    let msg = e.to_string();
    let key = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.contains("unknown field"))
        .unwrap_or(source)
        .to_string();
    Error::config(key, msg.trim().replace('\n', " "))
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must have the form key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty path segment"));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides in order and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| parse_err("<config>", e))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| parse_err("<config>", e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.n_scenes == 0 {
            return Err(Error::config("data.n_scenes", "must be > 0"));
        }
        self.generator.validate()?;
        if !(self.command.lookahead > 0.0) {
            return Err(Error::config("command.lookahead", "must be > 0"));
        }
        if !(self.command.threshold_deg > 0.0 && self.command.threshold_deg < 180.0) {
            return Err(Error::config("command.threshold_deg", "must lie in (0, 180)"));
        }
        self.planner.validate()?;
        self.text.validate()?;
        self.adapter.validate()?;
        self.train.validate()?;
        self.eval.stop_rule.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Hash of the whole resolved config.
    pub fn hash(&self) -> String {
        stable_hash(self)
    }

    /// Hash of the sections that determine trained weights; evaluation and
    /// output settings are excluded so one checkpoint can be re-evaluated.
    pub fn model_hash(&self) -> String {
        stable_hash(&ModelView {
            data_seed: self.data.seed,
            n_scenes: self.data.n_scenes,
            generator: &self.generator,
            command: &self.command,
            planner: &self.planner,
            text: &self.text,
            adapter: &self.adapter,
            train: &self.train,
        })
    }
}
