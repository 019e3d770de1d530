//! Mini-batch training loop, evaluation harness, checkpointing, and the
//! learning-rate sweep.
//!
//! Training minimizes the mean teacher-forced route likelihood loss with
//! Adam over seeded, shuffled mini-batches. Every epoch ends with a greedy
//! evaluation of the validation set; the weights with the best validation
//! rank correlation are the ones returned. A non-finite loss aborts the run
//! with the offending batch's position and contents. Checkpoints are JSON
//! containers of all tensors plus optimizer moments, versioned and stamped
//! with the config fingerprint; loading against a different config refuses.

use crate::baselines::{self, BaselineKind};
use crate::config::TrainConfig;
use crate::instance::Instance;
use crate::metrics::{MetricError, MetricReport};
use crate::model::{ModelError, PapnModel};
use crate::params::ParamSet;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Default `k` for the hit-ratio column.
pub const DEFAULT_HR_K: usize = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{which} dataset is empty")]
    EmptyDataset { which: &'static str },
    #[error(
        "loss is not finite ({value}) at epoch {epoch}, batch {batch} \
         (dataset indices {indices:?})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
        indices: Vec<usize>,
    },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint version {found}, this build reads {expected}")]
    Version { expected: u32, found: u32 },
    #[error("checkpoint fingerprint {found} does not match config fingerprint {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("checkpoint tensors do not match the model: {0}")]
    Corrupt(String),
}

/// One epoch's record in the training history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricReport,
}

/// A finished training run: the best-validation model and the full history.
pub struct TrainOutcome {
    pub model: PapnModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_krc: f64,
    /// Final position of the shuffling RNG, for the checkpoint record.
    pub rng_word_pos: u128,
}

/// Builds a freshly initialized model for the config (weights Xavier-uniform,
/// biases zero, deterministic per `config.seed`).
pub fn init_params(cfg: &TrainConfig) -> Result<PapnModel, TrainError> {
    Ok(PapnModel::new(cfg.clone())?)
}

/// Greedy-decodes every instance and aggregates the metrics.
pub fn evaluate_at_k(
    model: &PapnModel,
    dataset: &[Instance],
    k: usize,
) -> Result<MetricReport, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset { which: "eval" });
    }
    let pairs = dataset
        .iter()
        .map(|inst| Ok((model.predict(inst)?, inst.label_route.clone())))
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(MetricReport::compute(&pairs, k)?)
}

pub fn evaluate(model: &PapnModel, dataset: &[Instance]) -> Result<MetricReport, TrainError> {
    evaluate_at_k(model, dataset, DEFAULT_HR_K)
}

/// Metric report for a non-learned baseline over the same dataset.
pub fn evaluate_baseline(
    kind: BaselineKind,
    dataset: &[Instance],
    k: usize,
) -> Result<MetricReport, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset { which: "eval" });
    }
    let pairs: Vec<_> = dataset
        .iter()
        .map(|inst| (baselines::predict(kind, inst), inst.label_route.clone()))
        .collect();
    Ok(MetricReport::compute(&pairs, k)?)
}

/// Trains a fresh model on `train_set`, tracking validation rank correlation
/// after every epoch; the returned model carries the weights of the best
/// validation epoch.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Instance],
    val_set: &[Instance],
) -> Result<TrainOutcome, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset { which: "train" });
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset { which: "val" });
    }
    let mut model = init_params(cfg)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(0x5f5f);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut g = crate::autodiff::Graph::new();
            let b = model.params.bind(&mut g);
            let loss = model.batch_nll(&mut g, &b, &batch)?;
            let value = g.value(loss);
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    value,
                    indices: chunk.to_vec(),
                });
            }
            loss_sum += value * chunk.len() as f64;
            g.backward(loss).map_err(ModelError::from)?;
            model.params.adam_step(&g, &b, cfg.lr, cfg.clip_norm);
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val = evaluate(&model, val_set)?;
        let krc = val.krc.mean;
        if best.as_ref().map_or(true, |(_, k, _)| krc > *k) {
            best = Some((epoch, krc, model.params.clone()));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val,
        });
    }

    let (best_epoch, best_val_krc, best_params) =
        best.expect("at least one epoch ran (epochs is validated positive)");
    model.params = best_params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_krc,
        rng_word_pos: shuffle_rng.get_word_pos(),
    })
}

/// One learning rate's result in a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lr: f64,
    pub best_epoch: usize,
    pub val: MetricReport,
}

/// Trains once per learning rate (same seed, same data) and returns the
/// rows sorted by validation rank correlation, best first.
pub fn lr_sweep(
    cfg: &TrainConfig,
    grid: &[f64],
    train_set: &[Instance],
    val_set: &[Instance],
) -> Result<Vec<SweepRow>, TrainError> {
    let mut rows = Vec::with_capacity(grid.len());
    for &lr in grid {
        let run_cfg = TrainConfig {
            lr,
            ..cfg.clone()
        };
        let out = train(&run_cfg, train_set, val_set)?;
        let val = evaluate(&out.model, val_set)?;
        rows.push(SweepRow {
            lr,
            best_epoch: out.best_epoch,
            val,
        });
    }
    rows.sort_by(|a, b| b.val.krc.mean.total_cmp(&a.val.krc.mean));
    Ok(rows)
}

/// Everything a resumed or evaluated run needs, as one JSON document.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub fingerprint: String,
    pub epoch: usize,
    pub seed: u64,
    /// Position of the shuffling RNG, decimal-encoded (the value exceeds
    /// what JSON numbers carry exactly).
    pub rng_word_pos: String,
    pub params: ParamSet,
}

/// Writes the model's tensors and optimizer moments alongside the config
/// fingerprint.
pub fn save_checkpoint(
    path: &Path,
    model: &PapnModel,
    epoch: usize,
    rng_word_pos: u128,
) -> Result<(), TrainError> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        fingerprint: model.cfg.fingerprint(),
        epoch,
        seed: model.cfg.seed,
        rng_word_pos: rng_word_pos.to_string(),
        params: model.params.clone(),
    };
    std::fs::write(path, serde_json::to_string(&ckpt)?)?;
    Ok(())
}

/// Reads a checkpoint back into a model built from `cfg`. Refuses any file
/// whose version or config fingerprint differs from this build and config.
pub fn load_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<(PapnModel, Checkpoint), TrainError> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(TrainError::Version {
            expected: CHECKPOINT_VERSION,
            found: ckpt.version,
        });
    }
    let expected = cfg.fingerprint();
    if ckpt.fingerprint != expected {
        return Err(TrainError::FingerprintMismatch {
            expected,
            found: ckpt.fingerprint,
        });
    }
    let mut model = init_params(cfg)?;
    if ckpt.params.tensors.len() != model.params.tensors.len() {
        return Err(TrainError::Corrupt(format!(
            "{} tensors, model has {}",
            ckpt.params.tensors.len(),
            model.params.tensors.len()
        )));
    }
    for (have, want) in ckpt.params.tensors.iter().zip(&model.params.tensors) {
        if have.name != want.name || have.rows != want.rows || have.cols != want.cols {
            return Err(TrainError::Corrupt(format!(
                "tensor {} [{}x{}], model expects {} [{}x{}]",
                have.name, have.rows, have.cols, want.name, want.rows, want.cols
            )));
        }
    }
    model.params = ckpt.params.clone();
    Ok((model, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{generate, GenConfig};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            hidden: 8,
            heads: 2,
            encoder_layers: 1,
            proximity_layers: 1,
            glimpses: 1,
            batch_size: 4,
            epochs: 2,
            lr: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn small_data(seed: u64, count: usize) -> Vec<Instance> {
        generate(&GenConfig {
            seed,
            count,
            n_min: 3,
            n_max: 5,
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn empty_datasets_are_rejected() {
        let data = small_data(0, 2);
        assert!(matches!(
            train(&small_cfg(), &[], &data),
            Err(TrainError::EmptyDataset { which: "train" })
        ));
        assert!(matches!(
            train(&small_cfg(), &data, &[]),
            Err(TrainError::EmptyDataset { which: "val" })
        ));
        let model = init_params(&small_cfg()).unwrap();
        assert!(matches!(
            evaluate(&model, &[]),
            Err(TrainError::EmptyDataset { which: "eval" })
        ));
    }

    #[test]
    fn zero_lr_epoch_leaves_parameters_bit_identical() {
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            ..small_cfg()
        };
        let data = small_data(1, 6);
        let fresh = init_params(&cfg).unwrap();
        let out = train(&cfg, &data, &data).unwrap();
        for (a, b) in fresh.params.tensors.iter().zip(&out.model.params.tensors) {
            assert_eq!(a.data, b.data, "{} drifted under lr=0", a.name);
        }
    }

    #[test]
    fn equal_seeds_give_identical_loss_curves() {
        let cfg = small_cfg();
        let data = small_data(2, 8);
        let a = train(&cfg, &data, &data).unwrap();
        let b = train(&cfg, &data, &data).unwrap();
        let curve = |o: &TrainOutcome| -> Vec<f64> {
            o.history.iter().map(|e| e.train_loss).collect()
        };
        assert_eq!(curve(&a), curve(&b));
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn one_small_step_on_a_frozen_batch_decreases_the_loss() {
        let cfg = TrainConfig {
            lr: 1e-4,
            ..small_cfg()
        };
        let data = small_data(4, 4);
        let mut model = init_params(&cfg).unwrap();
        let batch: Vec<&Instance> = data.iter().collect();

        let mut g = crate::autodiff::Graph::new();
        let b = model.params.bind(&mut g);
        let loss = model.batch_nll(&mut g, &b, &batch).unwrap();
        let before = g.value(loss);
        g.backward(loss).unwrap();
        model.params.adam_step(&g, &b, cfg.lr, None);

        let mut g2 = crate::autodiff::Graph::new();
        let b2 = model.params.bind(&mut g2);
        let loss2 = model.batch_nll(&mut g2, &b2, &batch).unwrap();
        let after = g2.value(loss2);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn training_reduces_loss_and_improves_fit() {
        let cfg = TrainConfig {
            epochs: 60,
            lr: 2e-3,
            batch_size: 8,
            ..small_cfg()
        };
        let data = small_data(5, 8);
        let out = train(&cfg, &data, &data).unwrap();
        let first = out.history.first().unwrap().train_loss;
        let last = out.history.last().unwrap().train_loss;
        assert!(
            last < 0.5 * first,
            "loss barely moved: {first} -> {last}"
        );
        assert!(out.best_val_krc > out.history[0].val.krc.mean - 1e-12);
    }

    #[test]
    fn diverged_run_aborts_naming_the_batch() {
        let cfg = TrainConfig {
            lr: 1e25,
            epochs: 3,
            batch_size: 2,
            ..small_cfg()
        };
        let data = small_data(6, 4); // two batches per epoch
        match train(&cfg, &data, &data) {
            Err(TrainError::NonFiniteLoss { epoch, indices, .. }) => {
                assert!(epoch >= 1);
                assert!(!indices.is_empty());
            }
            Err(e) => panic!("wrong error: {e}"),
            Ok(_) => panic!("run unexpectedly stayed finite"),
        }
    }

    #[test]
    fn forced_routes_evaluate_perfectly() {
        // window 1 leaves a single admissible node per step, so greedy
        // decode reproduces every label no matter the weights
        let data = generate(&GenConfig {
            seed: 7,
            count: 6,
            n_min: 4,
            n_max: 6,
            window: 1,
            ..GenConfig::default()
        })
        .unwrap();
        let model = init_params(&small_cfg()).unwrap();
        let report = evaluate(&model, &data).unwrap();
        assert_eq!(report.hr.mean, 1.0);
        assert_eq!(report.krc.mean, 1.0);
        assert_eq!(report.lsd.mean, 0.0);
        assert_eq!(report.ed.mean, 0.0);
    }

    #[test]
    fn baseline_evaluation_matches_directly_composed_metrics() {
        let data = small_data(8, 10);
        let report = evaluate_baseline(BaselineKind::DistanceGreedy, &data, 3).unwrap();
        let pairs: Vec<_> = data
            .iter()
            .map(|i| (crate::baselines::distance_greedy(i), i.label_route.clone()))
            .collect();
        let direct = MetricReport::compute(&pairs, 3).unwrap();
        assert_eq!(report, direct);
    }

    #[test]
    fn evaluation_report_is_within_ranges_on_random_weights() {
        let data = small_data(9, 12);
        let model = init_params(&small_cfg()).unwrap();
        let r = evaluate(&model, &data).unwrap();
        assert!((0.0..=1.0).contains(&r.hr.mean));
        assert!((-1.0..=1.0).contains(&r.krc.mean));
        assert!(r.lsd.mean >= 0.0);
        assert!(r.ed.mean >= 0.0);
        assert_eq!(r.count, 12);
    }

    #[test]
    fn single_lr_sweep_row_matches_a_plain_training_run() {
        let cfg = small_cfg();
        let data = small_data(10, 6);
        let rows = lr_sweep(&cfg, &[cfg.lr], &data, &data).unwrap();
        assert_eq!(rows.len(), 1);
        let out = train(&cfg, &data, &data).unwrap();
        let plain = evaluate(&out.model, &data).unwrap();
        assert_eq!(rows[0].val, plain);
        assert_eq!(rows[0].lr, cfg.lr);
    }

    #[test]
    fn sweep_rows_are_sorted_by_validation_krc_and_reproducible() {
        let cfg = small_cfg();
        let data = small_data(11, 6);
        let grid = [1e-4, 3e-5];
        let rows = lr_sweep(&cfg, &grid, &data, &data).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].val.krc.mean >= rows[1].val.krc.mean);
        for row in &rows {
            assert!((-1.0..=1.0).contains(&row.val.krc.mean));
        }
        let again = lr_sweep(&cfg, &grid, &data, &data).unwrap();
        for (a, b) in rows.iter().zip(&again) {
            assert_eq!(a.lr, b.lr);
            assert_eq!(a.val, b.val);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_evaluation_bit_exactly() {
        let cfg = small_cfg();
        let data = small_data(12, 5);
        let out = train(&cfg, &data, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &out.model, out.best_epoch, 99).unwrap();
        let (loaded, ckpt) = load_checkpoint(&path, &cfg).unwrap();
        assert_eq!(ckpt.epoch, out.best_epoch);
        assert_eq!(ckpt.rng_word_pos, "99");
        for (a, b) in out.model.params.tensors.iter().zip(&loaded.params.tensors) {
            assert_eq!(a.data, b.data);
            assert_eq!(a.m, b.m);
            assert_eq!(a.v, b.v);
        }
        let before = evaluate(&out.model, &data).unwrap();
        let after = evaluate(&loaded, &data).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn checkpoint_refuses_a_different_config() {
        let cfg = small_cfg();
        let model = init_params(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, 1, 0).unwrap();
        let other = TrainConfig {
            lr: 5e-4,
            ..cfg.clone()
        };
        match load_checkpoint(&path, &other) {
            Err(TrainError::FingerprintMismatch { expected, found }) => {
                assert_eq!(expected, other.fingerprint());
                assert_eq!(found, cfg.fingerprint());
                assert_ne!(expected, found);
            }
            Err(e) => panic!("wrong error: {e}"),
            Ok(_) => panic!("mismatched checkpoint unexpectedly loaded"),
        }
    }

    #[test]
    fn checkpoint_refuses_unknown_versions_and_garbage() {
        let cfg = small_cfg();
        let model = init_params(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, 1, 0).unwrap();
        let mut doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        doc["version"] = serde_json::json!(999);
        std::fs::write(&path, doc.to_string()).unwrap();
        assert!(matches!(
            load_checkpoint(&path, &cfg),
            Err(TrainError::Version { found: 999, .. })
        ));
        std::fs::write(&path, "not json").unwrap();
        assert!(matches!(
            load_checkpoint(&path, &cfg),
            Err(TrainError::Json(_))
        ));
    }
}
