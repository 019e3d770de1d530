//! `papn` — command-line toolkit for the route-prediction model: synthetic
//! data generation, training, evaluation, prediction, greedy baselines, and
//! hyperparameter sweeps.
//!
//! Results print to stdout; the reproducibility header, resolved config, and
//! all progress print to stderr. Exit codes: 0 success, 2 unusable input
//! (flag, config, or file parse errors, I/O failures), 3 checkpoint/config
//! fingerprint mismatch, 1 anything else.

mod commands;
mod util;

use clap::{Args, Parser, Subcommand};
use papn_core::baselines::BaselineKind;
use papn_core::generator::TimestepRule;
use std::path::PathBuf;
use std::process::ExitCode;
use util::OutputFormat;

#[derive(Parser)]
#[command(name = "papn", version, about = "Pickup-route prediction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic NDJSON dataset
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus its history
    Train(TrainArgs),
    /// Evaluate a checkpoint (or just validate a dataset)
    Eval(EvalArgs),
    /// Write greedy route predictions for every instance
    Predict(PredictArgs),
    /// Score a non-learned greedy baseline
    Baseline(BaselineArgs),
    /// Train once per learning rate and rank the results
    LrSweep(LrSweepArgs),
    /// Train every aggregation/mixing combination and rank the results
    MixSweep(MixSweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generator seed (falls back to PAPN_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 6)]
    n_min: usize,
    #[arg(long, default_value_t = 10)]
    n_max: usize,
    /// Probability of each adjacent label swap
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    /// Open route positions per decode step under per-step masks
    #[arg(long, default_value_t = 4)]
    window: usize,
    /// Mask schedule: per-step or all-available
    #[arg(long, default_value = "per-step", value_parser = parse_t_rule)]
    t_rule: TimestepRule,
    /// Output NDJSON path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, e.g. --set lr=3e-5 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training NDJSON dataset
    #[arg(long)]
    data: PathBuf,
    /// Validation NDJSON dataset
    #[arg(long)]
    val: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint output path
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// History output path (default: <out-checkpoint>.history.json)
    #[arg(long)]
    out_history: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "validate_only")]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    format: OutputFormat,
    /// Only parse and validate the dataset, then exit
    #[arg(long)]
    validate_only: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output path; one JSON line per instance
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    /// distance or time
    #[arg(long, value_parser = parse_kind)]
    kind: BaselineKind,
    /// Top-k size for the hit ratio
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    format: OutputFormat,
}

#[derive(Args)]
struct LrSweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Validation set; default splits the last fifth of --data
    #[arg(long)]
    val: Option<PathBuf>,
    /// Comma-separated learning rates, e.g. 1e-4,3e-5
    #[arg(long)]
    grid: String,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    format: OutputFormat,
}

#[derive(Args)]
struct MixSweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Validation set; default splits the last fifth of --data
    #[arg(long)]
    val: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    format: OutputFormat,
}

fn parse_kind(s: &str) -> Result<BaselineKind, String> {
    s.parse()
}

fn parse_t_rule(s: &str) -> Result<TimestepRule, String> {
    s.parse()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(
            a.seed, a.count, a.n_min, a.n_max, a.noise, a.window, a.t_rule, &a.out,
        ),
        Command::Train(a) => commands::train(
            &a.data,
            &a.val,
            a.config.config.as_deref(),
            &a.config.sets,
            &a.out_checkpoint,
            a.out_history.as_deref(),
        ),
        Command::Eval(a) => commands::eval(
            &a.data,
            a.checkpoint.as_deref(),
            a.config.config.as_deref(),
            &a.config.sets,
            a.format,
            a.validate_only,
        ),
        Command::Predict(a) => commands::predict(
            &a.data,
            &a.checkpoint,
            a.config.config.as_deref(),
            &a.config.sets,
            &a.out,
        ),
        Command::Baseline(a) => commands::baseline(&a.data, a.kind, a.k, a.format),
        Command::LrSweep(a) => {
            let grid = util::parse_grid(&a.grid)?;
            commands::lr_sweep(
                &a.data,
                a.val.as_deref(),
                &grid,
                a.config.config.as_deref(),
                &a.config.sets,
                a.format,
            )
        }
        Command::MixSweep(a) => commands::mix_sweep(
            &a.data,
            a.val.as_deref(),
            a.config.config.as_deref(),
            &a.config.sets,
            a.format,
        ),
    }
}

/// Maps an error chain to the documented exit codes.
fn exit_code(err: &anyhow::Error) -> u8 {
    use papn_core::trainer::TrainError;
    for cause in err.chain() {
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            return match t {
                TrainError::FingerprintMismatch { .. } => 3,
                TrainError::Io(_)
                | TrainError::Json(_)
                | TrainError::Version { .. }
                | TrainError::Corrupt(_)
                | TrainError::EmptyDataset { .. } => 2,
                _ => 1,
            };
        }
        if let Some(m) = cause.downcast_ref::<papn_core::model::ModelError>() {
            return match m {
                papn_core::model::ModelError::FeatureMismatch { .. } => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<papn_core::instance::InstanceError>().is_some()
            || cause.downcast_ref::<papn_core::config::ConfigError>().is_some()
            || cause.downcast_ref::<papn_core::generator::GenError>().is_some()
            || cause.downcast_ref::<util::InputError>().is_some()
            || cause.downcast_ref::<std::io::Error>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
        {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
