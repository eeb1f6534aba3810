use std::path::{Path, PathBuf};

use enformer::data::synthetic::{write_layout, SyntheticConfig};
use enformer::data::{
    resolve_split, scan_dataset, scan_training_pool, split_manifest, train_val_split, SampleId, SampleRef,
    SegmentationSample, TEST_SETS, TRAIN_SETS,
};
use enformer::interpret::{render_panel, save_png, Column};
use enformer::metrics::reference::{etis_ordering_holds, mdice_target};
use enformer::metrics::{
    aggregate, evaluate, write_records_csv, write_report_csv, write_report_json, DatasetRow, MetricConfig,
    ModelPredictor, OraclePredictor, Predictor,
};
use enformer::models::Segmenter;
use enformer::training::trainer::BEST_CHECKPOINT;
use enformer::training::{Checkpoint, Trainer};
use enformer::{Error, Result};
use image::{GrayImage, ImageBuffer, Luma};

use crate::config::RunConfig;

const ORACLE: &str = "oracle";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn split(cfg: &RunConfig, command_line: &str) -> Result<()> {
    cfg.write_manifest("split", command_line)?;
    let pool = scan_training_pool(&cfg.data.train_root)?;
    let (train, val) = train_val_split(&pool, cfg.data.split_ratio, cfg.data.split_seed)?;
    let path = cfg.split_manifest_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(&path, split_manifest(&train, &val)).map_err(|e| io_err(&path, e))?;
    for (name, _) in TRAIN_SETS {
        let count = |set: &[SampleRef]| set.iter().filter(|r| r.id.dataset == name).count();
        println!("{name}: {} train, {} val", count(&train), count(&val));
    }
    println!("total: {} train, {} val -> {}", train.len(), val.len(), path.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>, allow_config_mismatch: bool, command_line: &str) -> Result<()> {
    let manifest_path = cfg.split_manifest_path();
    let manifest = std::fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Dataset(format!(
            "cannot read split manifest {} ({e}); run `enformer split` first",
            manifest_path.display()
        ))
    })?;
    let (train, val) = resolve_split(&cfg.data.train_root, &manifest)?;
    cfg.write_manifest("train", command_line)?;
    let model = Segmenter::from_name(&cfg.model.name, cfg.model.init_seed)?;
    let report = model.parameter_report();
    log::info!(
        "{}: {} trainable parameters; {} train / {} val samples",
        cfg.model.name,
        report.total,
        train.len(),
        val.len()
    );
    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::resume(&model, cfg.train.clone(), train.len(), path, allow_config_mismatch)?;
            log::info!("resuming {} after epoch {}", path.display(), t.epoch());
            t
        }
        None => Trainer::new(&model, cfg.train.clone(), train.len())?,
    };
    let outcome = trainer.fit(&train, &val, Some(&cfg.out_dir))?;
    match outcome.best_epoch {
        Some(epoch) => println!(
            "best val dice {:.4} at epoch {epoch}; checkpoints in {}",
            outcome.best_val_dice,
            cfg.out_dir.display()
        ),
        None => println!("no epochs run; {} already complete", cfg.train.epochs),
    }
    Ok(())
}

/// A trained model, or the ground truth standing in for one.
enum Loaded {
    Model(Box<Segmenter>),
    Oracle,
}

fn load_model(path: &Path) -> Result<Segmenter> {
    let ck = Checkpoint::load(path, None, true)?;
    let model = Segmenter::from_name(&ck.meta.model, 0)?;
    ck.restore(&model)?;
    log::info!(
        "loaded {} ({} epochs) from {}",
        ck.meta.model,
        ck.meta.epoch,
        path.display()
    );
    Ok(model)
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&str>, command_line: &str) -> Result<()> {
    cfg.write_manifest("eval", command_line)?;
    let loaded = match checkpoint {
        Some(ORACLE) => Loaded::Oracle,
        Some(path) => Loaded::Model(Box::new(load_model(Path::new(path))?)),
        None => Loaded::Model(Box::new(load_model(&cfg.out_dir.join(BEST_CHECKPOINT))?)),
    };
    let (name, model_predictor);
    let predictor: &dyn Predictor = match &loaded {
        Loaded::Oracle => {
            name = ORACLE.to_string();
            &OraclePredictor
        }
        Loaded::Model(model) => {
            name = model.assembly().name.clone();
            model_predictor = ModelPredictor {
                model,
                size: cfg.metrics.input_size,
            };
            &model_predictor
        }
    };

    let mut rows = Vec::new();
    let mut records = Vec::new();
    for dataset in &cfg.data.test_sets {
        if !cfg.data.test_root.join(dataset).is_dir() {
            log::warn!("skipping {dataset}: not found under {}", cfg.data.test_root.display());
            continue;
        }
        let samples = scan_dataset(&cfg.data.test_root, dataset)?;
        let recs = evaluate(predictor, &samples, dataset, &cfg.metrics)?;
        rows.push(aggregate(&name, dataset, &recs)?);
        records.extend(recs);
    }
    if rows.is_empty() {
        return Err(Error::Dataset(format!(
            "none of the test sets exist under {}",
            cfg.data.test_root.display()
        )));
    }
    let dir = cfg.out_dir.join("eval");
    create_dir(&dir)?;
    write_report_csv(&rows, &dir.join("report.csv"))?;
    write_report_json(&rows, &dir.join("report.json"))?;
    write_records_csv(&records, &dir.join("per_image.csv"))?;
    print_table(&rows);
    if let Some(holds) = etis_ordering_holds(&rows) {
        println!("ETIS ordering enformer > fcbformer: {holds}");
    }
    println!("report written to {}", dir.display());
    Ok(())
}

fn print_table(rows: &[DatasetRow]) {
    println!(
        "{:<22} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9}",
        "dataset", "images", "mDice", "mIoU", "wFm", "Sm", "meanEm", "maxEm", "MAE", "reference"
    );
    for r in rows {
        let reference = mdice_target(&r.model, &r.dataset)
            .map(|t| format!("{t:.4}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<22} {:>6} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>9}",
            r.dataset, r.images, r.mdice, r.miou, r.wfm, r.sm, r.mean_em, r.max_em, r.mae, reference
        );
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// A sample for an image with no mask; the mask is left empty.
fn unlabeled(path: &Path) -> Result<SegmentationSample> {
    let image = image::open(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let mask = GrayImage::new(image.width(), image.height());
    let id = SampleId {
        dataset: String::new(),
        file: path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    SegmentationSample::new(id, image, mask)
}

pub fn predict(
    cfg: Option<&RunConfig>,
    checkpoint: &Path,
    threshold: Option<f64>,
    input: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let threshold = threshold.or(cfg.map(|c| c.eval.threshold)).unwrap_or(0.5);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let size = cfg
        .map(|c| c.metrics.input_size)
        .unwrap_or_else(|| MetricConfig::default().input_size);
    let out_dir = match (out, cfg) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(c)) => c.out_dir.join("predictions"),
        (None, None) => PathBuf::from("predictions"),
    };
    let inputs = if input.is_dir() {
        list_images(input)?
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(Error::Dataset(format!("{} does not exist", input.display())));
    };
    if inputs.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", input.display())));
    }
    let model = load_model(checkpoint)?;
    let predictor = ModelPredictor { model: &model, size };
    create_dir(&out_dir)?;
    for path in &inputs {
        let sample = unlabeled(path)?;
        let prob = predictor.predict(&sample)?;
        let (h, w) = sample.original_size;
        let prob_img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_vec(
            w as u32,
            h as u32,
            prob.iter().map(|p| (p * 65535.0).round() as u16).collect(),
        )
        .ok_or_else(|| Error::Shape("prediction does not match the image size".into()))?;
        let mask_img = GrayImage::from_vec(
            w as u32,
            h as u32,
            prob.iter().map(|&p| if p >= threshold { 255 } else { 0 }).collect(),
        )
        .ok_or_else(|| Error::Shape("prediction does not match the image size".into()))?;
        let s = stem(path);
        prob_img.save(out_dir.join(format!("{s}_prob.png")))?;
        mask_img.save(out_dir.join(format!("{s}_mask.png")))?;
    }
    println!("{} predictions written to {}", inputs.len(), out_dir.display());
    Ok(())
}

/// The mask for `image` in a sibling `masks` directory, matched by stem.
fn sibling_mask(image: &Path) -> Result<PathBuf> {
    let masks = image
        .parent()
        .and_then(|p| p.parent())
        .map(|p| p.join("masks"))
        .ok_or_else(|| Error::Dataset(format!("{} has no sibling masks directory", image.display())))?;
    let s = stem(image);
    list_images(&masks)?
        .into_iter()
        .find(|m| stem(m) == s)
        .ok_or_else(|| Error::Dataset(format!("no mask for {} in {}", image.display(), masks.display())))
}

pub fn visualize(
    cfg: &RunConfig,
    checkpoint: &Path,
    columns: Option<&str>,
    dataset: Option<&str>,
    images: &[PathBuf],
    command_line: &str,
) -> Result<()> {
    let explicit = columns.is_some();
    let names: Vec<String> = match columns {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        None => cfg.eval.panel_columns.clone(),
    };
    let columns = names.iter().map(|c| Column::parse(c)).collect::<Result<Vec<_>>>()?;
    cfg.write_manifest("visualize", command_line)?;

    let (label, refs) = if images.is_empty() {
        let name = match dataset {
            Some(d) => d.to_string(),
            None => cfg
                .data
                .test_sets
                .iter()
                .find(|d| cfg.data.test_root.join(d).is_dir())
                .cloned()
                .ok_or_else(|| Error::Dataset(format!("no test set under {}", cfg.data.test_root.display())))?,
        };
        let mut refs = scan_dataset(&cfg.data.test_root, &name)?;
        refs.truncate(cfg.eval.panel_limit);
        (name, refs)
    } else {
        let refs = images
            .iter()
            .map(|p| {
                Ok(SampleRef {
                    id: SampleId {
                        dataset: "custom".into(),
                        file: p
                            .file_name()
                            .map(|f| f.to_string_lossy().into_owned())
                            .unwrap_or_default(),
                    },
                    image_path: p.clone(),
                    mask_path: sibling_mask(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ("custom".to_string(), refs)
    };

    let model = load_model(checkpoint)?;
    let columns = if explicit {
        columns
    } else {
        // the configured columns may name layers this model lacks (lite models have
        // no second decoder); those are dropped rather than failing the whole panel
        let taps = model.tap_ids();
        columns
            .into_iter()
            .filter(|c| match c {
                Column::Layer { id, .. } if !taps.contains(&id.as_str()) => {
                    log::warn!("{} has no layer `{id}`; column skipped", model.assembly().name);
                    false
                }
                _ => true,
            })
            .collect()
    };
    let dir = cfg.out_dir.join("panels");
    for r in &refs {
        let sample = r.load()?;
        let panel = render_panel(&model, &sample, &columns, cfg.metrics.input_size)?;
        let path = dir.join(format!("{label}_{}.png", stem(&r.image_path)));
        save_png(&panel, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn synth(out: &Path, train: usize, test: usize, size: usize, seed: u64) -> Result<()> {
    if size < 8 || train == 0 || test == 0 {
        return Err(Error::Config(
            "synth needs --size >= 8 and nonzero --train and --test".into(),
        ));
    }
    let cfg = SyntheticConfig::new(size, size);
    let train_root = out.join("TrainDataset");
    let test_root = out.join("TestDataset");
    for (i, (name, _)) in TRAIN_SETS.iter().enumerate() {
        write_layout(&train_root, name, train, &cfg, seed + i as u64)?;
    }
    for (i, (name, _)) in TEST_SETS.iter().enumerate() {
        write_layout(&test_root, name, test, &cfg, seed + 100 + i as u64)?;
    }
    println!(
        "wrote {} training and {} test pairs under {}",
        train * TRAIN_SETS.len(),
        test * TEST_SETS.len(),
        out.display()
    );
    Ok(())
}
