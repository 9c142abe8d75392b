use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use nudge_core::adapter::Variant;
use nudge_core::config::RunConfig;
use nudge_core::evaluator::{pretty_table, rows_to_csv, trajectory_dump, EvalReport, MethodEval};
use nudge_core::experiment::{
    ablation_config, ablation_report, adapter_bases, adapter_stem, comparison_report, prepare, train_one, AdapterRun,
    Splits, TrainedModels,
};
use nudge_core::planner::PlannerStage;
use nudge_core::scenegen::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetHeader, Split};
use nudge_core::trainer::{encode_log, train_baselines, Baselines, Checkpoint, TrainOutcome};
use nudge_core::Error;

#[derive(Parser)]
#[command(name = "nudge", version, about = "Language-conditioned residuals over a frozen trajectory planner")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=0.003`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic scene dataset.
    Gen {
        /// Output file; defaults to `data.path`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the train and val splits to separate files.
        #[arg(long)]
        split: bool,
    },
    /// Fit the planner baselines and the language adapters.
    Train {
        /// Continue from existing checkpoints in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs (resumable later).
        #[arg(long)]
        stop_after: Option<usize>,
        /// Train independent adapters on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Evaluate trained checkpoints and write the comparison report.
    Eval,
    /// Train and evaluate the adapter progression under random routing.
    Ablate {
        #[arg(long)]
        parallel: bool,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_TRAIN: u8 = 4;
const EXIT_REPORT: u8 = 5;

struct Failure {
    code: u8,
    message: String,
}

/// Wraps a core error into the exit class of the stage it came from;
/// configuration errors keep their own class wherever they surface.
fn stage(code: u8) -> impl Fn(Error) -> Failure {
    move |e| Failure {
        code: if matches!(e, Error::Config { .. }) { EXIT_CONFIG } else { code },
        message: e.to_string(),
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p, &cli.overrides),
        None => RunConfig::from_toml("", &cli.overrides),
    }
    .map_err(stage(EXIT_CONFIG))?;
    match cli.command {
        Cmd::Gen { out, split } => cmd_gen(&config, out, split),
        Cmd::Train {
            resume,
            stop_after,
            parallel,
        } => cmd_train(&config, resume, stop_after, parallel),
        Cmd::Eval => cmd_eval(&config),
        Cmd::Ablate { parallel } => cmd_ablate(&config, parallel),
    }
}

fn write(path: &Path, text: &str, code: u8) -> Outcome<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| fail(code, format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| fail(code, format!("{}: {e}", path.display())))
}

fn split_path(path: &Path, split: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scenes");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("jsonl");
    path.with_file_name(format!("{stem}.{split}.{ext}"))
}

fn cmd_gen(config: &RunConfig, out: Option<PathBuf>, split: bool) -> Outcome<()> {
    let path = out.unwrap_or_else(|| config.data.path.clone());
    let scenes = generate_dataset(config.data.seed, config.data.n_scenes, &config.generator).map_err(stage(EXIT_DATA))?;
    let header = DatasetHeader::new(config.data.seed, config.data.n_scenes, &config.generator);
    if split {
        for (name, which) in [("train", Split::Train), ("val", Split::Val)] {
            let part: Vec<_> = scenes.iter().filter(|s| s.split == which).cloned().collect();
            let mut h = header.clone();
            h.n_scenes = part.len();
            let p = split_path(&path, name);
            save_dataset(&p, &Dataset { header: h, scenes: part }).map_err(stage(EXIT_DATA))?;
            println!("wrote {}", p.display());
        }
    } else {
        save_dataset(&path, &Dataset { header, scenes }).map_err(stage(EXIT_DATA))?;
        println!("wrote {} ({} scenes)", path.display(), config.data.n_scenes);
    }
    Ok(())
}

fn load_splits(config: &RunConfig) -> Outcome<Splits> {
    let path = &config.data.path;
    if !path.exists() {
        return Err(fail(
            EXIT_DATA,
            format!("dataset {} does not exist; run `nudge gen` first", path.display()),
        ));
    }
    let dataset = load_dataset(path).map_err(stage(EXIT_DATA))?;
    if let Some(w) = dataset.config_mismatch(config.data.seed, &config.generator) {
        eprintln!("warning: {w}");
    }
    Splits::new(dataset.scenes).map_err(stage(EXIT_DATA))
}

#[derive(Serialize, Deserialize)]
struct BaselinesFile {
    config_hash: String,
    baselines: Baselines,
}

fn checkpoint_path(config: &RunConfig, base: PlannerStage, variant: Variant) -> PathBuf {
    config.io.out_dir.join(format!("{}.ckpt.json", adapter_stem(base, variant)))
}

fn log_path(config: &RunConfig, base: PlannerStage, variant: Variant) -> PathBuf {
    config.io.out_dir.join(format!("{}.log.jsonl", adapter_stem(base, variant)))
}

fn cmd_train(config: &RunConfig, resume: bool, stop_after: Option<usize>, parallel: bool) -> Outcome<()> {
    let splits = load_splits(config)?;
    let regime = config.train.regime;
    let baselines = train_baselines(&splits.train, &config.planner, &config.command, &config.train, regime)
        .map_err(stage(EXIT_TRAIN))?;
    let out = &config.io.out_dir;
    let model_hash = config.model_hash();
    write(&out.join("config.toml"), &config.to_toml(), EXIT_TRAIN)?;
    let file = BaselinesFile {
        config_hash: model_hash,
        baselines,
    };
    let text = serde_json::to_string(&file).map_err(|e| fail(EXIT_TRAIN, e.to_string()))?;
    write(&out.join("baselines.json"), &text, EXIT_TRAIN)?;

    let variant = config.adapter.variant;
    let bases = adapter_bases(regime);
    let mut jobs = Vec::new();
    for &base in &bases {
        let ck = checkpoint_path(config, base, variant);
        let resume_from = if resume && ck.exists() {
            Some(Checkpoint::load(&ck).map_err(stage(EXIT_TRAIN))?)
        } else {
            None
        };
        jobs.push((base, resume_from));
    }
    let theta_of = |b: PlannerStage| file.baselines.get(b);
    let train = |(base, resume_from): (PlannerStage, Option<Checkpoint>)| -> Outcome<(PlannerStage, TrainOutcome)> {
        let prepared = prepare(config, &splits, theta_of(base)).map_err(stage(EXIT_TRAIN))?;
        let outcome = train_one(config, &prepared, theta_of(base), variant, resume_from, stop_after)
            .map_err(stage(EXIT_TRAIN))?;
        Ok((base, outcome))
    };
    let results: Vec<Outcome<_>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs.into_iter().map(|j| s.spawn(|| train(j))).collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        })
    } else {
        jobs.into_iter().map(train).collect()
    };
    for r in results {
        let (base, outcome) = r?;
        let ck = checkpoint_path(config, base, variant);
        outcome.checkpoint.save(&ck).map_err(stage(EXIT_TRAIN))?;
        let log = encode_log(&outcome.log).map_err(stage(EXIT_TRAIN))?;
        let lp = log_path(config, base, variant);
        let previous = if resume { fs::read_to_string(&lp).unwrap_or_default() } else { String::new() };
        write(&lp, &(previous + &log), EXIT_TRAIN)?;
        let last = outcome.log.last().map(|r| r.val_ade).unwrap_or(f64::NAN);
        println!(
            "{}: epoch {}/{} val ADE {:.3} -> {}",
            adapter_stem(base, variant),
            outcome.checkpoint.epoch,
            config.train.epochs,
            last,
            ck.display()
        );
    }
    Ok(())
}

fn load_models(config: &RunConfig) -> Outcome<TrainedModels> {
    let out = &config.io.out_dir;
    let expected = config.model_hash();
    let path = out.join("baselines.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| fail(EXIT_REPORT, format!("{}: {e}; run `nudge train` first", path.display())))?;
    let file: BaselinesFile =
        serde_json::from_str(&text).map_err(|e| fail(EXIT_REPORT, format!("{}: {e}", path.display())))?;
    if file.config_hash != expected {
        return Err(fail(
            EXIT_REPORT,
            format!(
                "{} was produced by model config {} but the current config hashes to {}; \
                 retrain or evaluate with the config used for training",
                path.display(),
                file.config_hash,
                expected
            ),
        ));
    }
    let variant = config.adapter.variant;
    let mut adapters = Vec::new();
    for base in adapter_bases(config.train.regime) {
        let ck_path = checkpoint_path(config, base, variant);
        let ck = Checkpoint::load(&ck_path).map_err(|e| Failure {
            code: EXIT_REPORT,
            message: format!("method {}: {e}", adapter_stem(base, variant)),
        })?;
        if ck.config_hash != expected {
            return Err(fail(
                EXIT_REPORT,
                format!(
                    "{} was trained with config {} but the current config hashes to {}; refusing to evaluate",
                    ck_path.display(),
                    ck.config_hash,
                    expected
                ),
            ));
        }
        if ck.planner_hash != file.baselines.get(base).hash() {
            return Err(fail(
                EXIT_REPORT,
                format!("{} belongs to a different planner than baselines.json", ck_path.display()),
            ));
        }
        if ck.epoch < config.train.epochs {
            eprintln!(
                "warning: {} stopped at epoch {} of {}",
                ck_path.display(),
                ck.epoch,
                config.train.epochs
            );
        }
        adapters.push(AdapterRun {
            base,
            variant,
            outcome: TrainOutcome {
                checkpoint: ck,
                log: Vec::new(),
            },
        });
    }
    Ok(TrainedModels {
        baselines: file.baselines,
        adapters,
    })
}

#[derive(Serialize)]
struct ReportFile<'a> {
    config_hash: String,
    config: &'a RunConfig,
    report: &'a EvalReport,
}

fn write_report(config: &RunConfig, name: &str, report: &EvalReport, evals: &[MethodEval]) -> Outcome<()> {
    let out = &config.io.out_dir;
    let hash = config.hash();
    let csv = rows_to_csv(&report.rows).map_err(stage(EXIT_REPORT))?;
    write(&out.join(format!("{name}.csv")), &format!("# config {hash}\n{csv}"), EXIT_REPORT)?;
    let json = serde_json::to_string_pretty(&ReportFile {
        config_hash: hash.clone(),
        config,
        report,
    })
    .map_err(|e| fail(EXIT_REPORT, e.to_string()))?;
    write(&out.join(format!("{name}.json")), &(json + "\n"), EXIT_REPORT)?;
    let table = pretty_table(report);
    write(&out.join(format!("{name}.txt")), &format!("# config {hash}\n{table}"), EXIT_REPORT)?;
    if config.eval.dump_trajectories {
        let dump = trajectory_dump(evals).map_err(stage(EXIT_REPORT))?;
        write(&out.join(format!("{name}-trajectories.jsonl")), &dump, EXIT_REPORT)?;
    }
    print!("{table}");
    println!("config {hash}");
    Ok(())
}

fn cmd_eval(config: &RunConfig) -> Outcome<()> {
    let splits = load_splits(config)?;
    let models = load_models(config)?;
    let (report, evals) = comparison_report(config, &splits, &models).map_err(stage(EXIT_REPORT))?;
    write_report(config, "report", &report, &evals)
}

fn cmd_ablate(config: &RunConfig, parallel: bool) -> Outcome<()> {
    let splits = load_splits(config)?;
    if config.train.regime != nudge_core::scenegen::Regime::Random {
        eprintln!("note: the ablation forces train.regime = random");
    }
    let config = ablation_config(config);
    let models = nudge_core::experiment::train_models(&config, &splits, &Variant::ALL, parallel)
        .map_err(stage(EXIT_TRAIN))?;
    let dir = config.io.out_dir.join("ablation");
    for run in &models.adapters {
        let p = dir.join(format!("{}.ckpt.json", run.file_stem()));
        run.outcome.checkpoint.save(&p).map_err(stage(EXIT_TRAIN))?;
    }
    let (report, evals) = ablation_report(&config, &splits, &models).map_err(stage(EXIT_REPORT))?;
    write_report(&config, "ablation", &report, &evals)
}
