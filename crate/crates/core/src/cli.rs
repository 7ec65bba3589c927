//! Command-line verbs: `generate`, `train`, `evaluate`, `report`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{write_suite, SuiteManifest, SuiteSpec};
use crate::error::{Error, Result};
use crate::model::TamClModel;
use crate::report::{build_report, parse_result, result_label, Report};
use crate::trainer::{evaluate as evaluate_task, run_sequence_partial, ExperimentResult, Method};

/// Environment variable holding the log filter (`error` … `trace`).
pub const LOG_ENV: &str = "TAMCL_LOG";

pub const RESULT_FILE: &str = "result.json";
pub const TIMING_FILE: &str = "timing.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const BUFFER_FILE: &str = "buffer.bin";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const EVALUATION_FILE: &str = "evaluation.json";

#[derive(Debug, Parser)]
#[command(name = "tamcl", version, about = "Continual learning on synthetic image+text tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic task suite to disk.
    Generate(GenerateArgs),
    /// Train a method over a task sequence.
    Train(TrainArgs),
    /// Score a saved checkpoint on the test splits of a config's tasks.
    Evaluate(EvaluateArgs),
    /// Compare result documents in one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Suite file; the built-in four-task suite when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment file; shipped defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub method: Option<Method>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to `<out_dir>/model.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Where to write `evaluation.json`; printed only when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Result documents written by `train`.
    #[arg(required = true)]
    pub results: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

/// Wall-clock sidecar written next to each result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub checkpoint: PathBuf,
    pub scores: Vec<TaskScore>,
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(&a).map(|_| ()),
        Command::Train(a) => train(&a).map(|_| ()),
        Command::Evaluate(a) => {
            let e = evaluate(&a)?;
            for s in &e.scores {
                println!("{}\t{:.4}", s.task, s.accuracy);
            }
            Ok(())
        }
        Command::Report(a) => {
            print!("{}", report(&a)?.to_table());
            Ok(())
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

pub fn generate(args: &GenerateArgs) -> Result<SuiteManifest> {
    let mut suite = match &args.config {
        Some(p) => SuiteSpec::load(p)?,
        None => SuiteSpec::default_suite(),
    };
    if let Some(seed) = args.seed {
        suite.seed = seed;
    }
    let manifest = write_suite(&suite, &args.out)?;
    for t in &manifest.tasks {
        info!(
            "{}: {} labels, {} train / {} test{}",
            t.name,
            t.label_count,
            t.train_pairs,
            t.test_pairs,
            if t.dual_image { ", two images" } else { "" }
        );
    }
    info!("wrote {} tasks to {}", manifest.tasks.len(), args.out.display());
    Ok(manifest)
}

/// Runs the sequence and writes its outputs. A failed run still leaves
/// `result.json`, marked failed, before the error is returned.
pub fn train(args: &TrainArgs) -> Result<ExperimentResult> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(method) = args.method {
        config.method = method;
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    if config.optimizer.lr >= 1e-2 {
        warn!("learning rate {} is high for this optimizer; small models often need about 1e-3", config.optimizer.lr);
    }
    let out = config.out_dir.clone();
    let plan = config.load_plan()?;
    create_dir(&out)?;
    write(&out.join(CONFIG_ECHO_FILE), config.to_toml()?)?;

    let start = Instant::now();
    let outcome = run_sequence_partial(&plan, &config.train_config())?;
    let timing = Timing {
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    write(&out.join(RESULT_FILE), serde_json::to_string_pretty(&outcome.result)? + "\n")?;
    write(&out.join(TIMING_FILE), serde_json::to_string_pretty(&timing)? + "\n")?;
    if let Some(e) = outcome.error {
        return Err(e);
    }
    outcome.trainer.model().save(&out.join(CHECKPOINT_FILE))?;
    if !outcome.trainer.buffer().is_empty() {
        outcome.trainer.buffer().save(&out.join(BUFFER_FILE))?;
    }
    info!("{} finished in {:.1}s; results in {}", config.method, timing.wall_clock_seconds, out.display());
    Ok(outcome.result)
}

/// Accuracy of the checkpoint on every task it knows that the config lists.
pub fn evaluate(args: &EvaluateArgs) -> Result<Evaluation> {
    let config = load_config(args.config.as_deref())?;
    let checkpoint = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| config.out_dir.join(CHECKPOINT_FILE));
    let model = TamClModel::load(&checkpoint)?;
    let plan = config.load_plan()?;
    let mut scores = Vec::new();
    for (i, info) in model.tasks().iter().enumerate() {
        match plan.tasks.iter().find(|t| t.name == info.name) {
            Some(t) => {
                let accuracy = evaluate_task(&model, &t.test, i).map_err(|e| e.for_task(&t.name))?;
                scores.push(TaskScore {
                    task: t.name.clone(),
                    accuracy,
                });
            }
            None => warn!("checkpoint task `{}` is not in the config; skipped", info.name),
        }
    }
    if scores.is_empty() {
        return Err(Error::invalid_argument(format!(
            "{} shares no task with the config",
            checkpoint.display()
        )));
    }
    let evaluation = Evaluation { checkpoint, scores };
    if let Some(out) = &args.out {
        create_dir(out)?;
        write(&out.join(EVALUATION_FILE), serde_json::to_string_pretty(&evaluation)? + "\n")?;
    }
    Ok(evaluation)
}

/// Writes `report.txt`, `report.csv`, `report.json` and one accuracy-matrix
/// CSV per result.
pub fn report(args: &ReportArgs) -> Result<Report> {
    let mut results = Vec::with_capacity(args.results.len());
    for path in &args.results {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r = parse_result(&text).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", path.display())),
            other => other,
        })?;
        results.push(r);
    }
    let report = build_report(&results)?;
    create_dir(&args.out)?;
    write(&args.out.join("report.txt"), report.to_table())?;
    write(&args.out.join("report.csv"), report.to_csv())?;
    write(&args.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    for (i, r) in results.iter().enumerate() {
        let name = format!("{:02}-{}-seed{}-accuracy.csv", i + 1, result_label(r), r.config.seed);
        write(&args.out.join(name), r.accuracy.to_csv(&r.task_names()))?;
    }
    Ok(report)
}
