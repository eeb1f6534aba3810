//! Dataset layout scanning, deterministic splitting, mask handling and tensor
//! preparation.
//!
//! A dataset lives at `<root>/<dataset>/{images,masks}/<name>.{png,jpg}`; an image and
//! its mask share the file stem.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub mod augment;
pub mod imageops;
pub mod synthetic;

pub use augment::{AugmentConfig, AugmentPlan};

/// Training datasets of the standard layout with their expected sizes.
pub const TRAIN_SETS: [(&str, usize); 2] = [("Kvasir", 900), ("CVC-ClinicDB", 550)];

/// Test datasets of the standard layout with their expected sizes.
pub const TEST_SETS: [(&str, usize); 5] = [
    ("Kvasir", 100),
    ("CVC-ClinicDB", 62),
    ("CVC-300", 60),
    ("CVC-ColonDB", 380),
    ("ETIS-LaribPolypDB", 196),
];

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub const DEFAULT_SPLIT_SEED: u64 = 42;
pub const DEFAULT_SPLIT_RATIO: f64 = 0.9;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleId {
    pub dataset: String,
    /// File name of the image, extension included.
    pub file: String,
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.dataset, self.file)
    }
}

/// An image/mask pair on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    pub id: SampleId,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

impl SampleRef {
    pub fn load(&self) -> Result<SegmentationSample> {
        let image = image::open(&self.image_path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", self.image_path.display())))?
            .to_rgb8();
        let raw = image::open(&self.mask_path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", self.mask_path.display())))?
            .to_luma8();
        if image.dimensions() != raw.dimensions() {
            return Err(Error::Dataset(format!(
                "{}: image is {:?} but mask is {:?}",
                self.id,
                image.dimensions(),
                raw.dimensions()
            )));
        }
        SegmentationSample::new(self.id.clone(), image, binarize_mask(&raw))
    }
}

/// A raw sample: 8-bit RGB image and a binary mask holding 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub id: SampleId,
    pub image: RgbImage,
    pub mask: GrayImage,
    /// `(height, width)` of the image as loaded.
    pub original_size: (usize, usize),
}

impl SegmentationSample {
    pub fn new(id: SampleId, image: RgbImage, mask: GrayImage) -> Result<Self> {
        if image.dimensions() != mask.dimensions() {
            return Err(Error::Dataset(format!("{id}: image and mask sizes differ")));
        }
        if mask.pixels().any(|p| p.0[0] > 1) {
            return Err(Error::Dataset(format!("{id}: mask is not binary")));
        }
        let (w, h) = image.dimensions();
        Ok(Self {
            id,
            image,
            mask,
            original_size: (h as usize, w as usize),
        })
    }
}

/// `1` where the raw value exceeds 127, else `0`.
pub fn binarize_mask(raw: &GrayImage) -> GrayImage {
    let mut out = raw.clone();
    for p in out.pixels_mut() {
        p.0[0] = u8::from(p.0[0] > 127);
    }
    out
}

fn list_dir(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !path.is_file() || !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
                return Err(Error::Dataset(format!(
                    "duplicate stem `{stem}`: {} and {}",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(out)
}

/// Lists the pairs of one dataset sorted by file name. Unpaired files are an error
/// naming every offender.
pub fn scan_dataset(root: &Path, name: &str) -> Result<Vec<SampleRef>> {
    let base = root.join(name);
    let (img_dir, mask_dir) = (base.join("images"), base.join("masks"));
    if !img_dir.is_dir() || !mask_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "{} needs `images` and `masks` subdirectories",
            base.display()
        )));
    }
    let images = list_dir(&img_dir)?;
    let masks = list_dir(&mask_dir)?;
    let orphans: Vec<String> = images
        .iter()
        .filter(|(k, _)| !masks.contains_key(*k))
        .chain(masks.iter().filter(|(k, _)| !images.contains_key(*k)))
        .map(|(_, p)| p.display().to_string())
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Dataset(format!(
            "unpaired files in {name}: {}",
            orphans.join(", ")
        )));
    }
    let mut out: Vec<SampleRef> = images
        .into_iter()
        .map(|(stem, image_path)| {
            let file = image_path
                .file_name()
                .and_then(|f| f.to_str())
                .unwrap_or(&stem)
                .to_string();
            SampleRef {
                id: SampleId {
                    dataset: name.to_string(),
                    file,
                },
                mask_path: masks[&stem].clone(),
                image_path,
            }
        })
        .collect();
    out.sort_by(|a, b| a.id.file.cmp(&b.id.file));
    Ok(out)
}

/// Concatenation of the training datasets under `root`.
pub fn scan_training_pool(root: &Path) -> Result<Vec<SampleRef>> {
    let mut pool = Vec::new();
    for (name, _) in TRAIN_SETS {
        pool.extend(scan_dataset(root, name)?);
    }
    Ok(pool)
}

/// Seeded shuffle of the whole pool, then the first `round(n * ratio)` go to training.
pub fn train_val_split<T: Clone>(samples: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "split ratio must lie strictly between 0 and 1, got {ratio}"
        )));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (samples.len() as f64 * ratio).round() as usize;
    let train = idx[..n_train].iter().map(|&i| samples[i].clone()).collect();
    let val = idx[n_train..].iter().map(|&i| samples[i].clone()).collect();
    Ok((train, val))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Train,
    Val,
}

impl Subset {
    fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Val => "val",
        }
    }
}

/// `<dataset>/<file>,<train|val>` lines, training entries first.
pub fn split_manifest(train: &[SampleRef], val: &[SampleRef]) -> String {
    let mut s = String::new();
    for (set, subset) in [(train, Subset::Train), (val, Subset::Val)] {
        for r in set {
            s.push_str(&format!("{},{}\n", r.id, subset.as_str()));
        }
    }
    s
}

/// Parses a split manifest into `(id, subset)` entries.
pub fn parse_split_manifest(text: &str) -> Result<Vec<(SampleId, Subset)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let bad = || Error::Dataset(format!("split manifest line {}: `{line}`", n + 1));
            let (path, subset) = line.rsplit_once(',').ok_or_else(bad)?;
            let (dataset, file) = path.split_once('/').ok_or_else(bad)?;
            let subset = match subset.trim() {
                "train" => Subset::Train,
                "val" => Subset::Val,
                _ => return Err(bad()),
            };
            Ok((
                SampleId {
                    dataset: dataset.to_string(),
                    file: file.to_string(),
                },
                subset,
            ))
        })
        .collect()
}

/// Resolves manifest entries against the training pool under `root`.
pub fn resolve_split(root: &Path, manifest: &str) -> Result<(Vec<SampleRef>, Vec<SampleRef>)> {
    let pool = scan_training_pool(root)?;
    let by_id: BTreeMap<&SampleId, &SampleRef> = pool.iter().map(|r| (&r.id, r)).collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (id, subset) in parse_split_manifest(manifest)? {
        let r = by_id
            .get(&id)
            .ok_or_else(|| Error::Dataset(format!("split entry {id} not found under {}", root.display())))?;
        match subset {
            Subset::Train => train.push((*r).clone()),
            Subset::Val => val.push((*r).clone()),
        }
    }
    Ok((train, val))
}

/// Source of raw samples, either held in memory or loaded on demand.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn get(&self, index: usize) -> Result<SegmentationSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [SegmentationSample] {
    fn len(&self) -> usize {
        <[SegmentationSample]>::len(self)
    }

    fn get(&self, index: usize) -> Result<SegmentationSample> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<SegmentationSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<SegmentationSample> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<SampleRef> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<SegmentationSample> {
        self[index].load()
    }
}

/// A sample ready for the network: standardized CHW image and binary mask, both at
/// `size x size`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub image: Vec<f32>,
    pub mask: Vec<f32>,
    pub size: usize,
    pub original_size: (usize, usize),
}

/// Bilinear (corner-aligned) resize of the image to `size`, scaling to `[0, 1]` and
/// ImageNet standardization; nearest resize of the mask.
pub fn normalize_resize(sample: &SegmentationSample, size: usize) -> Prepared {
    let planes = imageops::rgb_planes(&sample.image);
    let (h, w) = sample.original_size;
    let mut image = Vec::with_capacity(3 * size * size);
    for (c, plane) in planes.iter().enumerate() {
        let resized = imageops::resize_bilinear(plane, h, w, size, size);
        image.extend(resized.iter().map(|v| (v / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]));
    }
    let mask_plane: Vec<f32> = sample.mask.pixels().map(|p| p.0[0] as f32).collect();
    let mask = imageops::resize_nearest(&mask_plane, h, w, size, size)
        .into_iter()
        .map(|v| if v > 0.5 { 1.0 } else { 0.0 })
        .collect();
    Prepared {
        image,
        mask,
        size,
        original_size: sample.original_size,
    }
}

/// Stacks prepared samples into `(b, 3, s, s)` images and `(b, 1, s, s)` masks.
pub fn batch_tensors(batch: &[Prepared], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let first = batch.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let s = first.size;
    if batch.iter().any(|p| p.size != s) {
        return Err(Error::Shape("batch mixes spatial sizes".into()));
    }
    let images: Vec<f32> = batch.iter().flat_map(|p| p.image.iter().copied()).collect();
    let masks: Vec<f32> = batch.iter().flat_map(|p| p.mask.iter().copied()).collect();
    let b = batch.len();
    Ok((
        Tensor::from_vec(images, (b, 3, s, s), device)?.to_dtype(dtype)?,
        Tensor::from_vec(masks, (b, 1, s, s), device)?.to_dtype(dtype)?,
    ))
}
