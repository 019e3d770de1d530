//! One function per subcommand. Results go to stdout, diagnostics and the
//! reproducibility header to stderr.

use crate::util::{
    print_report, repro_header, resolve_config, sha256_of, split_train_val, OutputFormat,
};
use anyhow::{Context, Result};
use papn_core::baselines::BaselineKind;
use papn_core::config::{Aggregation, Mixing, TrainConfig};
use papn_core::generator::{self, GenConfig, TimestepRule};
use papn_core::instance::{self, Instance};
use papn_core::metrics::MetricReport;
use papn_core::trainer::{self, EpochRecord, SweepRow};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

fn load_data(path: &Path) -> Result<Vec<Instance>> {
    instance::load_ndjson(path).with_context(|| format!("loading {}", path.display()))
}

pub fn gen_data(
    seed: Option<u64>,
    count: usize,
    n_min: usize,
    n_max: usize,
    noise: f64,
    window: usize,
    t_rule: TimestepRule,
    out: &Path,
) -> Result<()> {
    let seed = match seed {
        Some(s) => s,
        None => crate::util::env_seed()?.unwrap_or(GenConfig::default().seed),
    };
    let cfg = GenConfig {
        seed,
        count,
        n_min,
        n_max,
        p_noise: noise,
        window,
        t_rule,
    };
    repro_header(Some(seed), &sha256_of(&cfg), &cfg);
    let instances = generator::generate(&cfg)?;
    instance::save_ndjson(out, &instances)?;
    println!(
        "wrote {} instances (nf={}, ef={}) to {}",
        instances.len(),
        generator::GEN_NF,
        generator::GEN_EF,
        out.display()
    );
    Ok(())
}

/// Training history as written next to the checkpoint.
#[derive(Serialize)]
struct HistoryDoc<'a> {
    config_fingerprint: String,
    seed: u64,
    best_epoch: usize,
    best_val_krc: f64,
    epochs: &'a [EpochRecord],
}

pub fn train(
    data: &Path,
    val: &Path,
    config: Option<&Path>,
    sets: &[String],
    out_checkpoint: &Path,
    out_history: Option<&Path>,
) -> Result<()> {
    let cfg = resolve_config(config, sets)?;
    repro_header(Some(cfg.seed), &cfg.fingerprint(), &cfg);
    let train_set = load_data(data)?;
    let val_set = load_data(val)?;
    let outcome = trainer::train(&cfg, &train_set, &val_set)?;
    for record in &outcome.history {
        eprintln!(
            "# epoch {:>4}  train_loss {:<12.6} val_krc {:.4}",
            record.epoch, record.train_loss, record.val.krc.mean
        );
    }

    trainer::save_checkpoint(
        out_checkpoint,
        &outcome.model,
        outcome.best_epoch,
        outcome.rng_word_pos,
    )?;
    let history_path = out_history
        .map(PathBuf::from)
        .unwrap_or_else(|| history_path_for(out_checkpoint));
    let doc = HistoryDoc {
        config_fingerprint: cfg.fingerprint(),
        seed: cfg.seed,
        best_epoch: outcome.best_epoch,
        best_val_krc: outcome.best_val_krc,
        epochs: &outcome.history,
    };
    std::fs::write(&history_path, serde_json::to_string_pretty(&doc)?)?;

    println!(
        "best epoch {} (val krc {:.4})",
        outcome.best_epoch, outcome.best_val_krc
    );
    let final_val = trainer::evaluate(&outcome.model, &val_set)?;
    println!("{}", final_val.table());
    println!("checkpoint: {}", out_checkpoint.display());
    println!("history: {}", history_path.display());
    Ok(())
}

/// Default history location: the checkpoint path plus `.history.json`.
pub fn history_path_for(checkpoint: &Path) -> PathBuf {
    let mut os = checkpoint.as_os_str().to_owned();
    os.push(".history.json");
    PathBuf::from(os)
}

pub fn eval(
    data: &Path,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    sets: &[String],
    format: OutputFormat,
    validate_only: bool,
) -> Result<()> {
    if validate_only {
        #[derive(Serialize)]
        struct ValidateDoc<'a> {
            command: &'a str,
            data: String,
        }
        let doc = ValidateDoc {
            command: "eval --validate-only",
            data: data.display().to_string(),
        };
        repro_header(None, &sha256_of(&doc), &doc);
        let instances = load_data(data)?;
        println!("validated {} instances", instances.len());
        return Ok(());
    }
    let cfg = resolve_config(config, sets)?;
    repro_header(Some(cfg.seed), &cfg.fingerprint(), &cfg);
    let checkpoint = checkpoint.expect("clap requires --checkpoint unless --validate-only");
    let (model, _) = trainer::load_checkpoint(checkpoint, &cfg)?;
    let dataset = load_data(data)?;
    let report = trainer::evaluate(&model, &dataset)?;
    print_report(&report, format)
}

#[derive(Serialize)]
struct PredictionLine {
    route: Vec<usize>,
    stepwise_probs: Vec<f64>,
}

pub fn predict(
    data: &Path,
    checkpoint: &Path,
    config: Option<&Path>,
    sets: &[String],
    out: &Path,
) -> Result<()> {
    let cfg = resolve_config(config, sets)?;
    repro_header(Some(cfg.seed), &cfg.fingerprint(), &cfg);
    let (model, _) = trainer::load_checkpoint(checkpoint, &cfg)?;
    let dataset = load_data(data)?;
    let mut file = std::fs::File::create(out)
        .with_context(|| format!("creating {}", out.display()))?;
    for inst in &dataset {
        let p = model.predict_with_probs(inst)?;
        let line = PredictionLine {
            route: p.route,
            stepwise_probs: p.stepwise_probs,
        };
        writeln!(file, "{}", serde_json::to_string(&line)?)?;
    }
    println!("wrote {} routes to {}", dataset.len(), out.display());
    Ok(())
}

pub fn baseline(data: &Path, kind: BaselineKind, k: usize, format: OutputFormat) -> Result<()> {
    #[derive(Serialize)]
    struct BaselineDoc {
        kind: String,
        k: usize,
    }
    let doc = BaselineDoc {
        kind: kind.to_string(),
        k,
    };
    repro_header(None, &sha256_of(&doc), &doc);
    let dataset = load_data(data)?;
    let report = trainer::evaluate_baseline(kind, &dataset, k)?;
    print_report(&report, format)
}

fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "        lr  best_epoch                 KRC                HR@3       LSD        ED\n",
    );
    for row in rows {
        out.push_str(&format!(
            "{:>10}  {:>10}  {:>18}  {:>18}  {:>8.4}  {:>8.4}\n",
            row.lr,
            row.best_epoch,
            row.val.krc.to_string(),
            row.val.hr.to_string(),
            row.val.lsd.mean,
            row.val.ed.mean
        ));
    }
    out.trim_end().to_string()
}

pub fn lr_sweep(
    data: &Path,
    val: Option<&Path>,
    grid: &[f64],
    config: Option<&Path>,
    sets: &[String],
    format: OutputFormat,
) -> Result<()> {
    let cfg = resolve_config(config, sets)?;
    repro_header(Some(cfg.seed), &cfg.fingerprint(), &cfg);
    let dataset = load_data(data)?;
    let (train_set, val_set) = match val {
        Some(path) => (dataset.as_slice(), load_data(path)?),
        None => {
            let (t, v) = split_train_val(&dataset)?;
            (t, v.to_vec())
        }
    };
    let rows = trainer::lr_sweep(&cfg, grid, train_set, &val_set)?;
    match format {
        OutputFormat::Table => println!("{}", sweep_table(&rows)),
        OutputFormat::Json => println!("{}", serde_json::to_string(&rows)?),
    }
    Ok(())
}

/// One aggregation/mixing combination's result in the mixing sweep.
#[derive(Serialize)]
struct MixRow {
    aggregation: Aggregation,
    mixing: Mixing,
    best_epoch: usize,
    val: MetricReport,
}

pub fn mix_sweep(
    data: &Path,
    val: Option<&Path>,
    config: Option<&Path>,
    sets: &[String],
    format: OutputFormat,
) -> Result<()> {
    let cfg = resolve_config(config, sets)?;
    repro_header(Some(cfg.seed), &cfg.fingerprint(), &cfg);
    let dataset = load_data(data)?;
    let (train_set, val_set) = match val {
        Some(path) => (dataset.as_slice(), load_data(path)?),
        None => {
            let (t, v) = split_train_val(&dataset)?;
            (t, v.to_vec())
        }
    };
    let aggregations = [
        Aggregation::Sum,
        Aggregation::Mean,
        Aggregation::Max,
        Aggregation::Min,
    ];
    let mixings = [Mixing::Sum, Mixing::RandomSelect];
    let mut rows = Vec::new();
    for aggregation in aggregations {
        for mixing in mixings {
            let run_cfg = TrainConfig {
                aggregation,
                mixing,
                ..cfg.clone()
            };
            eprintln!("# training aggregation={aggregation} mixing={mixing}");
            let outcome = trainer::train(&run_cfg, train_set, &val_set)?;
            let report = trainer::evaluate(&outcome.model, &val_set)?;
            rows.push(MixRow {
                aggregation,
                mixing,
                best_epoch: outcome.best_epoch,
                val: report,
            });
        }
    }
    rows.sort_by(|a, b| b.val.krc.mean.total_cmp(&a.val.krc.mean));
    match format {
        OutputFormat::Table => {
            println!(
                "aggregation  mixing         best_epoch                 KRC                HR@3       LSD        ED"
            );
            for row in &rows {
                println!(
                    "{:<11}  {:<13}  {:>10}  {:>18}  {:>18}  {:>8.4}  {:>8.4}",
                    row.aggregation.to_string(),
                    row.mixing.to_string(),
                    row.best_epoch,
                    row.val.krc.to_string(),
                    row.val.hr.to_string(),
                    row.val.lsd.mean,
                    row.val.ed.mean
                );
            }
        }
        OutputFormat::Json => println!("{}", serde_json::to_string(&rows)?),
    }
    Ok(())
}
