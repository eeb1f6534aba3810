//! The optimization loop: seeded batching and augmentation, AdamW under a one-cycle
//! schedule, per-epoch validation, best/last checkpoints and resumption.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{config_hash, Checkpoint, CheckpointMeta, FORMAT_VERSION};
use super::loss::combined_loss;
use super::optim::{AdamW, AdamWConfig};
use super::schedule::{OneCycle, OneCycleConfig};
use crate::data::augment::augment;
use crate::data::{batch_tensors, normalize_resize, AugmentConfig, Prepared, SampleSource};
use crate::error::{Error, Result};
use crate::metrics::{binarize, Counts};
use crate::models::Segmenter;

pub const BEST_CHECKPOINT: &str = "best.enfw";
pub const LAST_CHECKPOINT: &str = "last.enfw";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Peak learning rate of the one-cycle schedule.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub val_threshold: f64,
    pub image_size: usize,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub schedule: OneCycleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.0,
            epochs: 200,
            batch_size: 16,
            seed: 42,
            val_threshold: 0.5,
            image_size: 352,
            augment: true,
            augmentation: AugmentConfig::default(),
            schedule: OneCycleConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, reported together.
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            errs.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            errs.push("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if !(self.val_threshold > 0.0 && self.val_threshold < 1.0) {
            errs.push(format!("val_threshold must lie in (0, 1), got {}", self.val_threshold));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            errs.push(format!(
                "image_size must be a positive multiple of 32, got {}",
                self.image_size
            ));
        }
        let a = &self.augmentation;
        if !(0.0..=1.0).contains(&a.probability) {
            errs.push(format!(
                "augmentation.probability must lie in [0, 1], got {}",
                a.probability
            ));
        }
        if a.scale_range.0 <= 0.0 || a.scale_range.0 > a.scale_range.1 {
            errs.push(format!(
                "augmentation.scale_range {:?} is not a positive range",
                a.scale_range
            ));
        }
        if a.unsharp_sigma.0 <= 0.0 || a.unsharp_sigma.0 > a.unsharp_sigma.1 {
            errs.push(format!(
                "augmentation.unsharp_sigma {:?} is not a positive range",
                a.unsharp_sigma
            ));
        }
        if a.unsharp_kernel.is_multiple_of(2) {
            errs.push(format!(
                "augmentation.unsharp_kernel must be odd, got {}",
                a.unsharp_kernel
            ));
        }
        if !(0.0..1.0).contains(&a.grid_limit) {
            errs.push(format!(
                "augmentation.grid_limit must lie in [0, 1), got {}",
                a.grid_limit
            ));
        }
        if a.grid_steps == 0 {
            errs.push("augmentation.grid_steps must be positive".into());
        }
        let s = &self.schedule;
        if !(0.0..1.0).contains(&s.pct_start) {
            errs.push(format!("schedule.pct_start must lie in [0, 1), got {}", s.pct_start));
        }
        if s.div_factor < 1.0 || s.final_div_factor < 1.0 {
            errs.push("schedule division factors must be at least 1".into());
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.problems();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    /// Rate used by the last update of the epoch.
    pub lr: f64,
}

pub fn write_history_csv(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Mean per-image dice at `threshold` over `samples`, each resized to `size`.
pub fn validate(
    model: &Segmenter,
    samples: &dyn SampleSource,
    threshold: f64,
    size: usize,
    batch_size: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Dataset("validation set is empty".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let mut total = 0.0;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let prepared = chunk
            .iter()
            .map(|&i| Ok(normalize_resize(&samples.get(i)?, size)))
            .collect::<Result<Vec<_>>>()?;
        let (x, _) = batch_tensors(&prepared, model.dtype(), model.device())?;
        let prob = model.forward(&x, false)?.to_dtype(candle_core::DType::F64)?;
        for (b, p) in prepared.iter().enumerate() {
            let pred: Vec<f64> = prob.get(b)?.flatten_all()?.to_vec1()?;
            let gt: Vec<bool> = p.mask.iter().map(|&m| m > 0.5).collect();
            total += Counts::from_masks(&binarize(&pred, threshold), &gt).dice();
        }
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_val_dice: f64,
    pub best_epoch: Option<usize>,
}

pub struct Trainer<'m> {
    model: &'m Segmenter,
    cfg: TrainConfig,
    optimizer: AdamW,
    schedule: OneCycle,
    rng: ChaCha8Rng,
    steps_per_epoch: usize,
    global_step: usize,
    epoch: usize,
    history: Vec<EpochRecord>,
    best_val_dice: f64,
    last_lr: f64,
    config_hash: String,
}

impl<'m> Trainer<'m> {
    /// A fresh run over a training set of `train_len` samples.
    pub fn new(model: &'m Segmenter, cfg: TrainConfig, train_len: usize) -> Result<Self> {
        cfg.validate()?;
        if train_len == 0 {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let steps_per_epoch = train_len.div_ceil(cfg.batch_size);
        let schedule = OneCycle::new(cfg.learning_rate, cfg.epochs * steps_per_epoch, cfg.schedule)?;
        let optimizer = AdamW::new(
            model.store().trainable(),
            AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
        )?;
        let config_hash = config_hash(&(&model.assembly().name, &cfg, train_len))?;
        Ok(Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            last_lr: schedule.initial_lr(),
            cfg,
            optimizer,
            schedule,
            steps_per_epoch,
            global_step: 0,
            epoch: 0,
            history: Vec::new(),
            best_val_dice: f64::NEG_INFINITY,
            config_hash,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::save`].
    pub fn resume(
        model: &'m Segmenter,
        cfg: TrainConfig,
        train_len: usize,
        path: &Path,
        allow_config_mismatch: bool,
    ) -> Result<Self> {
        let mut t = Self::new(model, cfg, train_len)?;
        let ck = Checkpoint::load(path, Some(&t.config_hash), allow_config_mismatch)?;
        ck.restore(model)?;
        if let Some(state) = &ck.optimizer {
            t.optimizer.load_state(state)?;
        }
        t.rng.set_word_pos(ck.rng_word_pos()?);
        t.epoch = ck.meta.epoch;
        t.global_step = ck.meta.global_step;
        t.history = ck.meta.history.clone();
        t.best_val_dice = ck.meta.best_val_dice;
        if let Some(last) = t.history.last() {
            t.last_lr = last.lr;
        }
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn schedule(&self) -> &OneCycle {
        &self.schedule
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> usize {
        self.global_step
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    /// One update on a prepared batch; returns the loss before the update.
    pub fn train_step(
        &mut self,
        images: &candle_core::Tensor,
        masks: &candle_core::Tensor,
        batch: usize,
    ) -> Result<f64> {
        let prob = self.model.forward(images, true)?;
        let loss = combined_loss(&prob, masks)?;
        let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch + 1,
                batch,
            });
        }
        let grads = loss.backward()?;
        let lr = self.schedule.lr(self.global_step)?;
        self.optimizer.step(&grads, lr)?;
        self.last_lr = lr;
        self.global_step += 1;
        Ok(value)
    }

    fn prepare(&mut self, train: &dyn SampleSource, indices: &[usize]) -> Result<Vec<Prepared>> {
        // seeds are drawn in sample order, so the result does not depend on scheduling
        let seeds: Vec<u64> = if self.cfg.augment {
            indices.iter().map(|_| self.rng.random()).collect()
        } else {
            Vec::new()
        };
        let cfg = &self.cfg;
        indices
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let sample = train.get(i)?;
                let sample = if cfg.augment {
                    augment(&sample, &cfg.augmentation, &mut ChaCha8Rng::seed_from_u64(seeds[k]))
                } else {
                    sample
                };
                Ok(normalize_resize(&sample, cfg.image_size))
            })
            .collect()
    }

    /// One pass over `train` in a seeded order; returns the sample-weighted mean loss.
    pub fn run_epoch(&mut self, train: &dyn SampleSource) -> Result<f64> {
        if train.len().div_ceil(self.cfg.batch_size) != self.steps_per_epoch {
            return Err(Error::Dataset(format!(
                "training set changed size: {} samples for {} steps per epoch",
                train.len(),
                self.steps_per_epoch
            )));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let prepared = self.prepare(train, chunk)?;
            let (x, y) = batch_tensors(&prepared, self.model.dtype(), self.model.device())?;
            total += self.train_step(&x, &y, b)? * chunk.len() as f64;
        }
        Ok(total / train.len() as f64)
    }

    fn meta(&self, val_dice: f64) -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            model: self.model.assembly().name.clone(),
            epoch: self.epoch,
            global_step: self.global_step,
            val_dice,
            best_val_dice: self.best_val_dice,
            config_hash: self.config_hash.clone(),
            seed: self.cfg.seed,
            rng_word_pos: self.rng.get_word_pos().to_string(),
            weights_sha256: String::new(),
            optimizer: None,
            history: self.history.clone(),
        }
    }

    /// Captures parameters, optimizer state, random stream and history.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let val = self.history.last().map_or(f64::NAN, |r| r.val_dice);
        Checkpoint::capture(self.model, self.meta(val), Some(self.optimizer.state()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    /// Trains until the configured epoch count, validating after every epoch. With
    /// `out_dir`, writes `best.enfw` whenever validation dice improves, `last.enfw`
    /// and `history.csv` after every epoch.
    pub fn fit(
        &mut self,
        train: &dyn SampleSource,
        val: &dyn SampleSource,
        out_dir: Option<&Path>,
    ) -> Result<TrainOutcome> {
        self.fit_until(train, val, out_dir, self.cfg.epochs)
    }

    /// Like [`Trainer::fit`] but stops once `until` epochs are complete.
    pub fn fit_until(
        &mut self,
        train: &dyn SampleSource,
        val: &dyn SampleSource,
        out_dir: Option<&Path>,
        until: usize,
    ) -> Result<TrainOutcome> {
        if val.is_empty() {
            return Err(Error::Dataset("validation set is empty".into()));
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.epoch < until.min(self.cfg.epochs) {
            let train_loss = self.run_epoch(train)?;
            let val_dice = validate(
                self.model,
                val,
                self.cfg.val_threshold,
                self.cfg.image_size,
                self.cfg.batch_size,
            )?;
            self.epoch += 1;
            self.history.push(EpochRecord {
                epoch: self.epoch,
                train_loss,
                val_dice,
                lr: self.last_lr,
            });
            log::info!(
                "epoch {}/{}: loss {train_loss:.5}, val dice {val_dice:.4}, lr {:.3e}",
                self.epoch,
                self.cfg.epochs,
                self.last_lr
            );
            let improved = val_dice > self.best_val_dice;
            if improved {
                self.best_val_dice = val_dice;
            }
            if let Some(dir) = out_dir {
                if improved {
                    self.save(&dir.join(BEST_CHECKPOINT))?;
                }
                self.save(&dir.join(LAST_CHECKPOINT))?;
                write_history_csv(&self.history, &dir.join(HISTORY_FILE))?;
            }
        }
        Ok(self.outcome())
    }

    pub fn outcome(&self) -> TrainOutcome {
        let best = self
            .history
            .iter()
            .filter(|r| r.val_dice == self.best_val_dice)
            .map(|r| r.epoch)
            .next();
        TrainOutcome {
            history: self.history.clone(),
            best_val_dice: self.best_val_dice,
            best_epoch: best,
        }
    }
}

/// Paths of the artifacts [`Trainer::fit`] writes under `dir`.
pub fn run_artifacts(dir: &Path) -> [PathBuf; 3] {
    [
        dir.join(BEST_CHECKPOINT),
        dir.join(LAST_CHECKPOINT),
        dir.join(HISTORY_FILE),
    ]
}
