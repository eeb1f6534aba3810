//! Procedural polyp-like scenes for tests, smoke runs and demos.
//!
//! Each scene is a smoothly shaded mucosa-colored background with one or more
//! elliptical bumps of a warmer, brighter tone; the mask marks the bumps.

use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{SampleId, SampleRef, SegmentationSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub max_polyps: usize,
    /// Standard deviation of per-pixel noise in 8-bit units.
    pub noise: f32,
}

impl SyntheticConfig {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            max_polyps: 2,
            noise: 6.0,
        }
    }
}

struct Ellipse {
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    angle: f32,
}

impl Ellipse {
    /// Squared normalized radius; inside when below one.
    fn radius2(&self, y: f32, x: f32) -> f32 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }
}

pub fn synthetic_sample<R: Rng>(cfg: &SyntheticConfig, rng: &mut R, dataset: &str, index: usize) -> SegmentationSample {
    let (h, w) = (cfg.height, cfg.width);
    let side = h.min(w) as f32;
    let n = rng.random_range(1..=cfg.max_polyps.max(1));
    let polyps: Vec<Ellipse> = (0..n)
        .map(|_| Ellipse {
            cy: rng.random_range(0.25..0.75) * h as f32,
            cx: rng.random_range(0.25..0.75) * w as f32,
            ry: rng.random_range(0.10..0.22) * side,
            rx: rng.random_range(0.10..0.22) * side,
            angle: rng.random_range(0.0..std::f32::consts::PI),
        })
        .collect();
    let base = [
        rng.random_range(150.0..190.0f32),
        rng.random_range(70.0..100.0f32),
        rng.random_range(60.0..90.0f32),
    ];
    let tint = [
        rng.random_range(40.0..60.0f32),
        rng.random_range(30.0..50.0f32),
        rng.random_range(-10.0..10.0f32),
    ];
    let (gy, gx) = (rng.random_range(-30.0..30.0f32), rng.random_range(-30.0..30.0f32));
    let noise = Normal::new(0.0f32, cfg.noise.max(1e-6)).expect("valid deviation");

    let mut image = RgbImage::new(w as u32, h as u32);
    let mut mask = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
            let shade = gy * (fy / h as f32 - 0.5) + gx * (fx / w as f32 - 0.5);
            let r2 = polyps.iter().map(|e| e.radius2(fy, fx)).fold(f32::INFINITY, f32::min);
            let inside = r2 < 1.0;
            // dome shading peaks at the center of the bump
            let dome = if inside { 1.0 - 0.4 * r2 } else { 0.0 };
            let px: [u8; 3] = std::array::from_fn(|c| {
                let v = base[c] + shade + dome * tint[c] + noise.sample(rng);
                v.round().clamp(0.0, 255.0) as u8
            });
            image.put_pixel(x as u32, y as u32, image::Rgb(px));
            mask.put_pixel(x as u32, y as u32, image::Luma([u8::from(inside)]));
        }
    }
    let id = SampleId {
        dataset: dataset.to_string(),
        file: format!("{index:04}.png"),
    };
    SegmentationSample::new(id, image, mask).expect("generated pair is consistent")
}

pub fn synthetic_dataset(cfg: &SyntheticConfig, n: usize, seed: u64, dataset: &str) -> Vec<SegmentationSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| synthetic_sample(cfg, &mut rng, dataset, i)).collect()
}

/// Writes `n` scenes under `<root>/<dataset>/{images,masks}` with 0/255 masks.
pub fn write_layout(root: &Path, dataset: &str, n: usize, cfg: &SyntheticConfig, seed: u64) -> Result<Vec<SampleRef>> {
    let base = root.join(dataset);
    let (img_dir, mask_dir) = (base.join("images"), base.join("masks"));
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut refs = Vec::with_capacity(n);
    for s in synthetic_dataset(cfg, n, seed, dataset) {
        let image_path = img_dir.join(&s.id.file);
        let mask_path = mask_dir.join(&s.id.file);
        s.image
            .save(&image_path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", image_path.display())))?;
        let mut raw = s.mask.clone();
        for p in raw.pixels_mut() {
            p.0[0] *= 255;
        }
        raw.save(&mask_path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", mask_path.display())))?;
        refs.push(SampleRef {
            id: s.id,
            image_path,
            mask_path,
        });
    }
    Ok(refs)
}
