//! Evaluation protocol: threshold-swept dice, IoU and E-measure, plus weighted F,
//! S-measure and MAE on the continuous map, all at each image's original size.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{normalize_resize, SampleSource, SegmentationSample};
use crate::error::{Error, Result};
use crate::models::Segmenter;

pub mod basic;
pub mod reference;
pub mod smeasure;
pub mod wfm;

pub use basic::{binarize, mae, Counts, ThresholdCounter};
pub use smeasure::s_measure;
pub use wfm::{weighted_fbeta, WfmParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Average the swept metrics over `k = 0..=255` instead of `k = 1..=255`. At
    /// `t = 0` every pixel is foreground, which caps dice and IoU below one even for a
    /// perfect map, so it is left out by default.
    pub include_zero_threshold: bool,
    pub beta2: f64,
    pub alpha: f64,
    pub e_eps: f64,
    pub wfm_kernel: usize,
    pub wfm_sigma: f64,
    /// Side length the network sees.
    pub input_size: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            include_zero_threshold: false,
            beta2: 1.0,
            alpha: 0.5,
            e_eps: 1e-8,
            wfm_kernel: 7,
            wfm_sigma: 5.0,
            input_size: 352,
        }
    }
}

impl MetricConfig {
    /// `k / 255` over the configured range of `k`.
    pub fn thresholds(&self) -> Vec<f64> {
        let start = if self.include_zero_threshold { 0 } else { 1 };
        (start..=255).map(|k| k as f64 / 255.0).collect()
    }

    pub fn wfm_params(&self) -> WfmParams {
        WfmParams {
            beta2: self.beta2,
            kernel_size: self.wfm_kernel,
            sigma: self.wfm_sigma,
            ..WfmParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.beta2 <= 0.0 {
            errs.push(format!("beta2 must be positive, got {}", self.beta2));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            errs.push(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.wfm_kernel.is_multiple_of(2) {
            errs.push(format!("wfm_kernel must be odd, got {}", self.wfm_kernel));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            errs.push(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// A continuous prediction and binary truth of equal `h x w` size.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub pred: Vec<f64>,
    pub gt: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl EvalPair {
    pub fn new(pred: Vec<f64>, gt: Vec<bool>, height: usize, width: usize) -> Result<Self> {
        if pred.len() != height * width || gt.len() != height * width {
            return Err(Error::Shape(format!(
                "evaluation pair of {height}x{width} holds {} predictions and {} labels",
                pred.len(),
                gt.len()
            )));
        }
        if let Some(p) = pred.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Shape(format!("prediction {p} outside [0, 1]")));
        }
        Ok(Self {
            pred,
            gt,
            height,
            width,
        })
    }
}

/// Per-threshold dice, IoU and E-measure.
#[derive(Debug, Clone, PartialEq)]
pub struct Curves {
    pub thresholds: Vec<f64>,
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub e: Vec<f64>,
}

pub fn sweep_curves(pair: &EvalPair, cfg: &MetricConfig) -> Curves {
    let counter = ThresholdCounter::new(&pair.pred, &pair.gt);
    let thresholds = cfg.thresholds();
    let counts: Vec<Counts> = thresholds.iter().map(|&t| counter.counts(t)).collect();
    Curves {
        dice: counts.iter().map(Counts::dice).collect(),
        iou: counts.iter().map(Counts::iou).collect(),
        e: counts.iter().map(|c| c.e_measure(cfg.e_eps)).collect(),
        thresholds,
    }
}

/// Per-image scores in the order of the report columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub dataset: String,
    pub image: String,
    pub dice: f64,
    pub iou: f64,
    pub wfm: f64,
    pub sm: f64,
    pub mean_em: f64,
    pub max_em: f64,
    pub mae: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn sweep_metrics(pair: &EvalPair, cfg: &MetricConfig, dataset: &str, image: &str) -> ImageRecord {
    let curves = sweep_curves(pair, cfg);
    ImageRecord {
        dataset: dataset.to_string(),
        image: image.to_string(),
        dice: mean(&curves.dice),
        iou: mean(&curves.iou),
        wfm: weighted_fbeta(&pair.pred, &pair.gt, pair.height, pair.width, &cfg.wfm_params()),
        sm: s_measure(&pair.pred, &pair.gt, pair.height, pair.width, cfg.alpha),
        mean_em: mean(&curves.e),
        max_em: curves.e.iter().copied().fold(0.0, f64::max),
        mae: mae(&pair.pred, &pair.gt),
    }
}

/// One report row: per-image scores averaged over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub model: String,
    pub dataset: String,
    pub images: usize,
    #[serde(rename = "mDice")]
    pub mdice: f64,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "wFm")]
    pub wfm: f64,
    #[serde(rename = "Sm")]
    pub sm: f64,
    #[serde(rename = "meanEm")]
    pub mean_em: f64,
    #[serde(rename = "maxEm")]
    pub max_em: f64,
    #[serde(rename = "MAE")]
    pub mae: f64,
}

/// Column headers of a report row, in order.
pub const REPORT_COLUMNS: [&str; 10] = [
    "model", "dataset", "images", "mDice", "mIoU", "wFm", "Sm", "meanEm", "maxEm", "MAE",
];

/// Mean of every column over `records`; the result does not depend on their order
/// beyond floating-point summation.
pub fn aggregate(model: &str, dataset: &str, records: &[ImageRecord]) -> Result<DatasetRow> {
    if records.is_empty() {
        return Err(Error::Dataset(format!("no images to aggregate for {dataset}")));
    }
    let col = |f: fn(&ImageRecord) -> f64| {
        let mut v: Vec<f64> = records.iter().map(f).collect();
        // summing in sorted order makes the mean independent of record order
        v.sort_by(f64::total_cmp);
        mean(&v)
    };
    Ok(DatasetRow {
        model: model.to_string(),
        dataset: dataset.to_string(),
        images: records.len(),
        mdice: col(|r| r.dice),
        miou: col(|r| r.iou),
        wfm: col(|r| r.wfm),
        sm: col(|r| r.sm),
        mean_em: col(|r| r.mean_em),
        max_em: col(|r| r.max_em),
        mae: col(|r| r.mae),
    })
}

/// Anything that maps a raw sample to foreground probabilities at its original size.
pub trait Predictor: Sync {
    fn predict(&self, sample: &SegmentationSample) -> Result<Vec<f64>>;
}

/// Runs a model at `size x size` and resizes its output back to the sample size.
pub struct ModelPredictor<'a> {
    pub model: &'a Segmenter,
    pub size: usize,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, sample: &SegmentationSample) -> Result<Vec<f64>> {
        let prepared = normalize_resize(sample, self.size);
        let (x, _) =
            crate::data::batch_tensors(std::slice::from_ref(&prepared), self.model.dtype(), self.model.device())?;
        let prob = self.model.forward(&x, false)?;
        let full = crate::nn::resize(&prob, sample.original_size)?;
        let v: Vec<f64> = full.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1()?;
        Ok(v.into_iter().map(|p| p.clamp(0.0, 1.0)).collect())
    }
}

/// Returns the ground truth itself; useful to check the evaluation path end to end.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, sample: &SegmentationSample) -> Result<Vec<f64>> {
        Ok(sample.mask.pixels().map(|p| f64::from(p.0[0])).collect())
    }
}

pub fn eval_pair(sample: &SegmentationSample, pred: Vec<f64>) -> Result<EvalPair> {
    let (h, w) = sample.original_size;
    let gt = sample.mask.pixels().map(|p| p.0[0] == 1).collect();
    EvalPair::new(pred, gt, h, w)
}

/// Per-image records over a whole dataset. Predictions run in order; the metric
/// computations run in parallel.
pub fn evaluate(
    predictor: &dyn Predictor,
    samples: &dyn SampleSource,
    dataset: &str,
    cfg: &MetricConfig,
) -> Result<Vec<ImageRecord>> {
    if samples.is_empty() {
        return Err(Error::Dataset(format!("test set {dataset} is empty")));
    }
    let mut pairs = Vec::with_capacity(samples.len());
    for i in 0..samples.len() {
        let s = samples.get(i)?;
        let pred = predictor.predict(&s)?;
        pairs.push((s.id.file.clone(), eval_pair(&s, pred)?));
    }
    Ok(pairs
        .par_iter()
        .map(|(name, pair)| sweep_metrics(pair, cfg, dataset, name))
        .collect())
}

pub fn write_report_csv(rows: &[DatasetRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_report_json(rows: &[DatasetRow], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(rows)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_records_csv(records: &[ImageRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
