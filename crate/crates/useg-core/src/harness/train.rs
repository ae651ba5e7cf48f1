//! The training loop: seeded shuffling, AdamW under a cosine schedule,
//! per-epoch validation Dice, and best-checkpoint tracking.
//!
//! Reproducibility contract: parameter init is a pure function of the
//! run seed, the visiting order of epoch `e` is a pure function of
//! `seed ^ e`, and checkpoints serialize in sorted parameter order, so
//! re-running a config byte-identically reproduces its checkpoint.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, Sample, Split};
use crate::metrics::{dice_ce_loss, evaluate_pair};
use crate::tensor::{adamw_step, AdamWParams, AdamWState, CosineSchedule, Elem, Tape};

use super::model::{images_tensor, targets_tensor, Model};
use super::{HarnessError, Result, RunConfig};

/// Subdirectory receiving the best-validation checkpoint.
pub const BEST_CHECKPOINT_DIR: &str = "best";
/// Log file written next to the checkpoint.
pub const TRAIN_LOG_FILE: &str = "train_log.json";

/// Which samples train and which validate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldSelect {
    /// The dataset's own train and val splits.
    Holdout,
    /// Cross-validation: train on every other fold, validate on this one.
    /// Test samples stay held out.
    Fold(u8),
    /// All folds in index order, one run each.
    All,
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    /// Learning rate entering the epoch, i.e. at its first optimizer
    /// step. Always equals the closed-form cosine value at that step.
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub fusion: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub wall_seconds: f64,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    /// Path of the checkpoint that scored `best_val_dice`.
    pub checkpoint: String,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub checkpoint_dir: PathBuf,
    pub out_dir: PathBuf,
}

fn fusion_label(mode: crate::fusion::FusionMode) -> String {
    match serde_json::to_value(mode) {
        Ok(serde_json::Value::String(s)) => s,
        _ => format!("{mode:?}"),
    }
}

/// Mean Dice of the model over `samples`, batched for throughput.
fn validation_dice<T: Elem>(
    model: &Model<T>,
    samples: &[&Sample],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size) {
        let images = images_tensor::<T>(chunk, model.config.image_size)?;
        let captions: Vec<&str> = chunk.iter().map(|s| s.caption.as_str()).collect();
        let seg = model.segment(&images, &captions)?;
        for (sample, pred) in chunk.iter().zip(&seg.masks) {
            total += evaluate_pair(&sample.sample_id, pred, &sample.mask)?.dice;
        }
    }
    Ok(total / samples.len() as f64)
}

/// One optimizer step over one batch; returns the batch loss.
fn train_step<T: Elem>(
    model: &mut Model<T>,
    batch: &[&Sample],
    hp: &AdamWParams,
    state: &mut AdamWState<T>,
) -> Result<f64> {
    let images = images_tensor::<T>(batch, model.config.image_size)?;
    let targets = targets_tensor::<T>(batch, model.config.image_size)?;
    let captions: Vec<&str> = batch.iter().map(|s| s.caption.as_str()).collect();

    let mut tape = Tape::new();
    let img = tape.constant(images);
    let tgt = tape.constant(targets);
    let logits = model.logits(&mut tape, img, &captions)?;
    let loss = dice_ce_loss(&mut tape, logits, tgt)?;
    let loss_value = tape.value(loss).data()[0].to_f64_lossy();

    let grads = tape.backward(loss)?;
    adamw_step(&mut model.store, &grads.into_named(), state, hp)?;
    Ok(loss_value)
}

/// Trains `model` on `train`, validating on `val` after every epoch.
/// The best-validation checkpoint lands in `out_dir/best`; a NonFinite
/// forward or backward aborts the run but leaves that checkpoint.
pub fn train_model<T: Elem>(
    model: &mut Model<T>,
    cfg: &RunConfig,
    train: &[&Sample],
    val: &[&Sample],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(HarnessError::SplitEmpty("train".into()));
    }
    if val.is_empty() {
        return Err(HarnessError::SplitEmpty("val".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let checkpoint_dir = out_dir.join(BEST_CHECKPOINT_DIR);

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = CosineSchedule {
        lr_max: cfg.optimizer.lr,
        lr_min: cfg.lr_min,
        total_steps: (cfg.epochs * steps_per_epoch) as u64,
    };

    let start = Instant::now();
    let mut state = AdamWState::new();
    let mut global_step = 0u64;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best_val_dice = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut have_checkpoint = false;

    for epoch in 0..cfg.epochs {
        let epoch_lr = schedule.at(global_step)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            let hp = AdamWParams {
                lr: schedule.at(global_step)?,
                ..cfg.optimizer.clone()
            };
            let loss = train_step(model, &batch, &hp, &mut state).map_err(|e| {
                if e.is_non_finite() {
                    HarnessError::NonFinite {
                        epoch,
                        checkpoint: have_checkpoint.then(|| checkpoint_dir.clone()),
                    }
                } else {
                    e
                }
            })?;
            loss_sum += loss;
            global_step += 1;
        }

        let val_dice = validation_dice(model, val, cfg.batch_size)?;
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_dice,
            lr: epoch_lr,
        });

        if val_dice > best_val_dice {
            best_val_dice = val_dice;
            best_epoch = epoch;
            model.save(&checkpoint_dir)?;
            have_checkpoint = true;
        }
    }

    let log = TrainLog {
        fusion: fusion_label(cfg.model.fusion),
        seed: cfg.seed,
        epochs: records,
        wall_seconds: start.elapsed().as_secs_f64(),
        best_epoch,
        best_val_dice,
        checkpoint: checkpoint_dir.display().to_string(),
    };
    let mut body = serde_json::to_string_pretty(&log)?;
    body.push('\n');
    std::fs::write(out_dir.join(TRAIN_LOG_FILE), body)?;

    Ok(TrainOutcome {
        log,
        checkpoint_dir,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Partitions `samples` into train and validation pools for one fold
/// choice. Fold runs draw both pools from train+val; test is untouched.
fn fold_pools(samples: &[Sample], fold: Option<u8>) -> Result<(Vec<&Sample>, Vec<&Sample>)> {
    match fold {
        None => {
            let train: Vec<&Sample> = samples.iter().filter(|s| s.split == Split::Train).collect();
            let val: Vec<&Sample> = samples.iter().filter(|s| s.split == Split::Val).collect();
            Ok((train, val))
        }
        Some(k) => {
            let pool: Vec<&Sample> = samples.iter().filter(|s| s.split != Split::Test).collect();
            let max_fold = pool.iter().map(|s| s.fold).max().unwrap_or(0);
            if k > max_fold {
                return Err(HarnessError::Config(format!(
                    "fold {k} out of range; dataset has folds 0..={max_fold}"
                )));
            }
            let train: Vec<&Sample> = pool.iter().filter(|s| s.fold != k).copied().collect();
            let val: Vec<&Sample> = pool.iter().filter(|s| s.fold == k).copied().collect();
            Ok((train, val))
        }
    }
}

/// Full training entry point: loads the dataset, initializes a model
/// from the run seed, and trains once per selected fold. Holdout and
/// single-fold runs write to `cfg.out`; `All` nests `fold{k}` inside it.
pub fn train_run<T: Elem>(cfg: &RunConfig, fold: FoldSelect) -> Result<Vec<TrainOutcome>> {
    cfg.validate()?;
    let (samples, _manifest) = load_dataset(&cfg.dataset)?;

    let jobs: Vec<(Option<u8>, PathBuf)> = match fold {
        FoldSelect::Holdout => vec![(None, cfg.out.clone())],
        FoldSelect::Fold(k) => vec![(Some(k), cfg.out.clone())],
        FoldSelect::All => {
            let max_fold = samples
                .iter()
                .filter(|s| s.split != Split::Test)
                .map(|s| s.fold)
                .max()
                .ok_or_else(|| HarnessError::SplitEmpty("train".into()))?;
            (0..=max_fold)
                .map(|k| (Some(k), cfg.out.join(format!("fold{k}"))))
                .collect()
        }
    };

    let mut outcomes = Vec::with_capacity(jobs.len());
    for (fold_id, out_dir) in jobs {
        let (train, val) = fold_pools(&samples, fold_id)?;
        let mut model = Model::<T>::init(cfg.model.clone(), cfg.seed)?;
        outcomes.push(train_model(&mut model, cfg, &train, &val, &out_dir)?);
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use tempfile::tempdir;

    use crate::backbone::ModelConfig;
    use crate::data::{generate_dataset, write_dataset, GenerationConfig};
    use crate::fusion::FusionMode;
    use crate::tensor::cosine_lr;

    use super::*;

    fn tiny_run(dataset: &Path, out: &Path, epochs: usize) -> RunConfig {
        let mut model = ModelConfig::tiny();
        model.fusion = FusionMode::StageAdd;
        RunConfig {
            model,
            epochs,
            batch_size: 4,
            optimizer: AdamWParams::default(),
            lr_min: 5e-5,
            seed: 29,
            dataset: dataset.to_path_buf(),
            out: out.to_path_buf(),
        }
    }

    fn tiny_dataset_dir(dir: &Path) -> GenerationConfig {
        let cfg = GenerationConfig {
            seed: 41,
            ambiguity: 0,
            image_size: 32,
            train: 10,
            val: 4,
            test: 4,
            n_folds: 5,
        };
        let samples = generate_dataset(&cfg).unwrap();
        write_dataset(&samples, &cfg, dir).unwrap();
        cfg
    }

    fn sorted_ids(pool: &[&Sample]) -> Vec<String> {
        let mut ids: Vec<String> = pool.iter().map(|s| s.sample_id.clone()).collect();
        ids.sort();
        ids
    }

    #[test]
    fn short_run_logs_cosine_rates_and_saves_best_checkpoint() {
        let data_dir = tempdir().unwrap();
        tiny_dataset_dir(data_dir.path());
        let out_dir = tempdir().unwrap();
        let cfg = tiny_run(data_dir.path(), out_dir.path(), 3);

        let outcomes = train_run::<f32>(&cfg, FoldSelect::Holdout).unwrap();
        assert_eq!(outcomes.len(), 1);
        let log = &outcomes[0].log;

        assert_eq!(log.epochs.len(), 3);
        assert_eq!(log.fusion, "stage_add");
        let steps_per_epoch = 10usize.div_ceil(cfg.batch_size);
        let total = (cfg.epochs * steps_per_epoch) as u64;
        for rec in &log.epochs {
            let expect =
                cosine_lr((rec.epoch * steps_per_epoch) as u64, total, 5e-3, 5e-5).unwrap();
            assert_eq!(rec.lr, expect, "epoch {} lr drifted", rec.epoch);
            assert!(rec.train_loss.is_finite());
            assert!((0.0..=1.0).contains(&rec.val_dice));
        }
        assert_eq!(log.epochs[0].lr, 5e-3);

        let ckpt = &outcomes[0].checkpoint_dir;
        assert!(ckpt.join("manifest.json").exists());
        assert!(ckpt.join("weights.bin").exists());
        assert!(ckpt.join("vocab.json").exists());
        assert!(out_dir.path().join(TRAIN_LOG_FILE).exists());

        let best = log.epochs[log.best_epoch].val_dice;
        assert_eq!(log.best_val_dice, best);
        assert!(log.epochs.iter().all(|r| r.val_dice <= best));

        let reloaded = Model::<f32>::load(ckpt).unwrap();
        assert_eq!(reloaded.config, cfg.model);
    }

    #[test]
    fn identical_configs_reproduce_identical_checkpoints() {
        let data_dir = tempdir().unwrap();
        tiny_dataset_dir(data_dir.path());

        let run = |out: &Path| -> Vec<u8> {
            let cfg = tiny_run(data_dir.path(), out, 2);
            let outcomes = train_run::<f32>(&cfg, FoldSelect::Holdout).unwrap();
            std::fs::read(outcomes[0].checkpoint_dir.join("weights.bin")).unwrap()
        };
        let out_a = tempdir().unwrap();
        let out_b = tempdir().unwrap();
        assert_eq!(run(out_a.path()), run(out_b.path()));
    }

    #[test]
    fn fold_pools_partition_without_touching_test() {
        let data_dir = tempdir().unwrap();
        tiny_dataset_dir(data_dir.path());
        let (samples, _) = load_dataset(data_dir.path()).unwrap();

        let (hold_train, hold_val) = fold_pools(&samples, None).unwrap();
        assert_eq!(hold_train.len(), 10);
        assert_eq!(hold_val.len(), 4);

        let pool_ids: Vec<String> = {
            let pool: Vec<&Sample> = samples.iter().filter(|s| s.split != Split::Test).collect();
            sorted_ids(&pool)
        };
        let (train, val) = fold_pools(&samples, Some(0)).unwrap();
        assert!(val.iter().all(|s| s.fold == 0));
        assert!(train.iter().all(|s| s.fold != 0));
        assert!(train.iter().chain(&val).all(|s| s.split != Split::Test));
        let mut together = sorted_ids(&train);
        together.extend(sorted_ids(&val));
        together.sort();
        assert_eq!(together, pool_ids, "folds must partition train+val");

        let err = fold_pools(&samples, Some(99)).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
    }

    #[test]
    fn non_finite_forward_aborts_without_stale_checkpoint() {
        let data_dir = tempdir().unwrap();
        tiny_dataset_dir(data_dir.path());
        let out_dir = tempdir().unwrap();
        let cfg = tiny_run(data_dir.path(), out_dir.path(), 2);
        let (samples, _) = load_dataset(&cfg.dataset).unwrap();
        let (train, val) = fold_pools(&samples, None).unwrap();

        let mut model = Model::<f32>::init(cfg.model.clone(), cfg.seed).unwrap();
        let poisoned = model.store.get_mut("stem.conv.w").unwrap();
        poisoned.data_mut()[0] = f32::NAN;

        let err = train_model(&mut model, &cfg, &train, &val, out_dir.path()).unwrap_err();
        match err {
            HarnessError::NonFinite { epoch, checkpoint } => {
                assert_eq!(epoch, 0);
                assert!(checkpoint.is_none(), "no epoch finished, so no checkpoint");
            }
            other => panic!("expected NonFinite abort, got {other}"),
        }
        assert!(!out_dir.path().join(BEST_CHECKPOINT_DIR).exists());
    }
}
