//! `msad`: synthesize telemetry, train and evaluate the multiscale detector,
//! run sensitivity sweeps and emit reports.
//!
//! Exit codes: 0 success, 2 configuration or contract error, 3 numeric
//! failure, 4 I/O error, 5 every trial of a sweep failed.

mod commands;
mod config;
mod exit;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use msad_core::data::SplitPart;
use msad_core::evaluation::{ReportFormat, SweepKind, DEFAULT_THRESHOLD};

use crate::manifest::Invocation;

#[derive(Parser, Debug)]
#[command(
    name = "msad",
    version,
    about = "Multiscale Transformer anomaly detection for telemetry"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled synthetic telemetry CSV.
    Synth(SynthArgs),
    /// Train a detector on a labelled CSV.
    Train(TrainArgs),
    /// Score a split of a CSV with a checkpoint and report metrics.
    Eval(EvalArgs),
    /// Train and evaluate over a grid of one setting, several seeds each.
    Sweep(SweepArgs),
    /// Turn a score dump or sweep table into a report.
    Report(ReportArgs),
    /// Replay a run from its manifest and check the outputs match.
    Rerun(RerunArgs),
}

#[derive(Args, Debug)]
struct Settings {
    /// Flat JSON object of settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, `key=value`; wins over --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    settings: Settings,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Labelled input CSV.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    settings: Settings,
    /// Seed for initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for checkpoint, training log and manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train, test or all.
    #[arg(long, default_value = "test")]
    split: SplitPart,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
    /// Directory for the report, score dump and manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// learning_rate, optimizer, activation, noise, anomaly_ratio or ablation_scales.
    kind: SweepKind,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated values; defaults to the kind's standard grid.
    #[arg(long)]
    grid: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Single seed; shorthand for --seeds N.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    #[command(flatten)]
    settings: Settings,
    /// Trials run in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Score dump (`score,label`) or sweep table CSV.
    input: PathBuf,
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Also write ROC curve points for a score dump.
    #[arg(long)]
    roc: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RerunArgs {
    manifest: PathBuf,
    /// Write outputs here instead of the recorded location.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve(command: Command) -> anyhow::Result<Result<Invocation, RerunArgs>> {
    Ok(Ok(match command {
        Command::Synth(a) => {
            let mut flat = config::layered(a.settings.config.as_deref(), &a.settings.sets)?;
            if let Some(seed) = a.seed {
                flat.insert("seed".into(), seed.into());
            }
            Invocation::Synth {
                spec: config::synthetic(&flat)?,
                out: a.out,
            }
        }
        Command::Train(a) => {
            let mut flat = config::layered(a.settings.config.as_deref(), &a.settings.sets)?;
            if let Some(seed) = a.seed {
                flat.insert("seed".into(), seed.into());
            }
            Invocation::Train {
                data: a.data,
                config: config::experiment(&flat)?,
                out: a.out,
            }
        }
        Command::Eval(a) => Invocation::Eval {
            checkpoint: a.checkpoint,
            data: a.data,
            split: a.split,
            threshold: a.threshold,
            format: a.format,
            out: a.out,
        },
        Command::Sweep(a) => {
            let flat = config::layered(a.settings.config.as_deref(), &a.settings.sets)?;
            let seeds = match a.seed {
                Some(s) => vec![s],
                None => config::parse_seeds(&a.seeds)?,
            };
            Invocation::Sweep {
                kind: a.kind.name().into(),
                grid: a
                    .grid
                    .as_deref()
                    .map(config::split_list)
                    .unwrap_or_else(|| a.kind.default_grid()),
                seeds,
                data: a.data,
                config: config::experiment(&flat)?,
                jobs: a.jobs,
                format: a.format,
                out: a.out,
            }
        }
        Command::Report(a) => Invocation::Report {
            input: a.input,
            format: a.format,
            threshold: a.threshold,
            roc: a.roc,
            out: a.out,
        },
        Command::Rerun(a) => return Ok(Err(a)),
    }))
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    let outcome = match resolve(cli.command)? {
        Ok(inv) => commands::execute(&inv)?,
        Err(a) => commands::rerun(&a.manifest, a.out)?,
    };
    log::info!("manifest written to {}", outcome.manifest.display());
    Ok(outcome.code)
}

/// The error chain on one line, without causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

/// Runs one invocation and returns its exit code.
fn status(cli: Cli) -> i32 {
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            exit::exit_code(&e)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    ExitCode::from(status(Cli::parse()) as u8)
}
