//! Config resolution, the reproducibility header, and output helpers.

use anyhow::{Context, Result};
use papn_core::config::TrainConfig;
use papn_core::metrics::MetricReport;
use papn_core::trainer::CHECKPOINT_VERSION;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;

/// A malformed flag value or unusable input; mapped to exit code 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

macro_rules! input_bail {
    ($($arg:tt)*) => {
        return Err($crate::util::InputError(format!($($arg)*)).into())
    };
}

/// Where results go; diagnostics always go to stderr.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OutputFormat {
    Table,
    Json,
}

/// Resolves the model/training config: defaults, then the `PAPN_SEED`
/// environment fallback, then the key=value config file, then `--set`
/// overrides, in that precedence order.
pub fn resolve_config(file: Option<&Path>, sets: &[String]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_file_text(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
    }
    for kv in sets {
        let Some((key, value)) = kv.split_once('=') else {
            input_bail!("--set {kv:?} is not key=value");
        };
        cfg.apply_kv(key.trim(), value.trim())
            .with_context(|| format!("applying --set {kv:?}"))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The `PAPN_SEED` fallback, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var("PAPN_SEED") {
        Ok(raw) => match raw.parse() {
            Ok(seed) => Ok(Some(seed)),
            Err(_) => input_bail!("PAPN_SEED {raw:?} is not an unsigned integer"),
        },
        Err(_) => Ok(None),
    }
}

pub fn sha256_of(doc: &impl Serialize) -> String {
    let json = serde_json::to_string(doc).expect("config serialization is infallible");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Prints the reproducibility header and the resolved config to stderr
/// before the command acts.
pub fn repro_header(seed: Option<u64>, config_hash: &str, config: &impl Serialize) {
    eprintln!(
        "# papn {} (checkpoint format v{CHECKPOINT_VERSION})",
        env!("CARGO_PKG_VERSION")
    );
    match seed {
        Some(s) => eprintln!("# seed: {s}"),
        None => eprintln!("# seed: none (deterministic command)"),
    }
    eprintln!("# config sha256: {config_hash}");
    if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(config) {
        for (key, value) in map {
            eprintln!("#   {key} = {value}");
        }
    }
}

/// Deterministic holdout split: the last fifth (at least one instance)
/// validates, the rest trains.
pub fn split_train_val<T>(data: &[T]) -> Result<(&[T], &[T])> {
    if data.len() < 2 {
        input_bail!("need at least 2 instances to split off a validation set");
    }
    let val_len = (data.len() / 5).max(1);
    let split = data.len() - val_len;
    Ok((&data[..split], &data[split..]))
}

pub fn print_report(report: &MetricReport, format: OutputFormat) -> Result<()> {
    match format {
        OutputFormat::Table => println!("{}", report.table()),
        OutputFormat::Json => println!("{}", serde_json::to_string(report)?),
    }
    Ok(())
}

/// Parses a comma-separated learning-rate grid.
pub fn parse_grid(grid: &str) -> Result<Vec<f64>> {
    let mut rates = Vec::new();
    for entry in grid.split(',') {
        let entry = entry.trim();
        match entry.parse::<f64>() {
            Ok(lr) if lr.is_finite() && lr >= 0.0 => rates.push(lr),
            _ => input_bail!("grid entry {entry:?} is not a finite, non-negative rate"),
        }
    }
    if rates.is_empty() {
        input_bail!("grid lists no learning rates");
    }
    Ok(rates)
}
