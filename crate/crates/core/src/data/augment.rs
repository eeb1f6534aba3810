//! Joint image/mask augmentation.
//!
//! Six operations are drawn independently, each with the configured probability, and
//! applied in a fixed order: horizontal flip, vertical flip, affine, grid distortion,
//! color jitter, unsharp masking. Geometric operations move image and mask with the
//! same parameters (bilinear for the image, nearest for the mask); color operations
//! never touch the mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::imageops::{
    blur_separable, gaussian_kernel, hsv_to_rgb, planes_to_rgb, rgb_planes, rgb_to_hsv, sample_bilinear, sample_nearest,
};
use super::SegmentationSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub probability: f64,
    pub max_rotation_deg: f32,
    /// Largest shift per axis as a fraction of the side length.
    pub max_translate: f32,
    pub scale_range: (f32, f32),
    pub grid_steps: usize,
    /// Largest relative change of a grid cell's extent.
    pub grid_limit: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub unsharp_sigma: (f32, f32),
    pub unsharp_kernel: usize,
    pub unsharp_amount: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            max_rotation_deg: 45.0,
            max_translate: 0.1,
            scale_range: (0.9, 1.1),
            grid_steps: 5,
            grid_limit: 0.3,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            unsharp_sigma: (0.5, 2.0),
            unsharp_kernel: 5,
            unsharp_amount: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub angle_deg: f32,
    /// Shift as fractions of width and height.
    pub translate: (f32, f32),
    pub scale: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridDistort {
    /// Relative change per cell along x and along y.
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unsharp {
    pub sigma: f32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentPlan {
    pub hflip: bool,
    pub vflip: bool,
    pub affine: Option<Affine>,
    pub grid: Option<GridDistort>,
    pub color: Option<ColorJitter>,
    pub unsharp: Option<Unsharp>,
}

pub const OP_NAMES: [&str; 6] = ["hflip", "vflip", "affine", "grid", "color", "unsharp"];

fn symmetric<R: Rng>(rng: &mut R, bound: f32) -> f32 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

impl AugmentPlan {
    pub fn identity() -> Self {
        Self::default()
    }

    /// Draws the six on/off decisions first, then the parameters of the enabled ops.
    pub fn sample<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let on: [bool; 6] = std::array::from_fn(|_| rng.random_bool(cfg.probability));
        let affine = on[2].then(|| Affine {
            angle_deg: symmetric(rng, cfg.max_rotation_deg),
            translate: (symmetric(rng, cfg.max_translate), symmetric(rng, cfg.max_translate)),
            scale: rng.random_range(cfg.scale_range.0..=cfg.scale_range.1),
        });
        let grid = on[3].then(|| GridDistort {
            dx: (0..cfg.grid_steps).map(|_| symmetric(rng, cfg.grid_limit)).collect(),
            dy: (0..cfg.grid_steps).map(|_| symmetric(rng, cfg.grid_limit)).collect(),
        });
        let color = on[4].then(|| ColorJitter {
            brightness: 1.0 + symmetric(rng, cfg.brightness),
            contrast: 1.0 + symmetric(rng, cfg.contrast),
            saturation: 1.0 + symmetric(rng, cfg.saturation),
            hue: symmetric(rng, cfg.hue),
        });
        let unsharp = on[5].then(|| Unsharp {
            sigma: rng.random_range(cfg.unsharp_sigma.0..=cfg.unsharp_sigma.1),
        });
        Self {
            hflip: on[0],
            vflip: on[1],
            affine,
            grid,
            color,
            unsharp,
        }
    }

    /// Which of the six operations are enabled, in [`OP_NAMES`] order.
    pub fn enabled(&self) -> [bool; 6] {
        [
            self.hflip,
            self.vflip,
            self.affine.is_some(),
            self.grid.is_some(),
            self.color.is_some(),
            self.unsharp.is_some(),
        ]
    }

    pub fn is_identity(&self) -> bool {
        !self.enabled().iter().any(|&b| b)
    }

    pub fn apply(&self, sample: &SegmentationSample, cfg: &AugmentConfig) -> SegmentationSample {
        let (h, w) = sample.original_size;
        let mut planes = rgb_planes(&sample.image);
        let mut mask: Vec<f32> = sample.mask.pixels().map(|p| p.0[0] as f32).collect();
        let mut geometric = |map: &dyn Fn(f32, f32) -> (f32, f32)| {
            for p in planes.iter_mut() {
                *p = warp(p, h, w, map, Interp::Bilinear);
            }
            mask = warp(&mask, h, w, map, Interp::Nearest);
        };
        if self.hflip {
            geometric(&|y, x| (y, (w - 1) as f32 - x));
        }
        if self.vflip {
            geometric(&|y, x| ((h - 1) as f32 - y, x));
        }
        if let Some(a) = &self.affine {
            geometric(&affine_inverse(a, h, w));
        }
        if let Some(g) = &self.grid {
            let fy = grid_axis(&g.dy, h);
            let fx = grid_axis(&g.dx, w);
            geometric(&|y, x| (piecewise(&fy, y), piecewise(&fx, x)));
        }
        if let Some(c) = &self.color {
            color_jitter(&mut planes, c);
        }
        if let Some(u) = &self.unsharp {
            let k = gaussian_kernel(u.sigma, cfg.unsharp_kernel);
            for p in planes.iter_mut() {
                let blurred = blur_separable(p, h, w, &k);
                for (v, b) in p.iter_mut().zip(blurred) {
                    *v = (*v + cfg.unsharp_amount * (*v - b)).clamp(0.0, 255.0);
                }
            }
        }
        let mut out = sample.clone();
        out.image = planes_to_rgb(&planes, h, w);
        for (p, v) in out.mask.pixels_mut().zip(mask) {
            p.0[0] = u8::from(v > 0.5);
        }
        out
    }
}

/// Draws a plan and applies it.
pub fn augment<R: Rng>(sample: &SegmentationSample, cfg: &AugmentConfig, rng: &mut R) -> SegmentationSample {
    AugmentPlan::sample(cfg, rng).apply(sample, cfg)
}

#[derive(Clone, Copy)]
enum Interp {
    Bilinear,
    Nearest,
}

/// Output pixel `(y, x)` reads the source at `map(y, x)`; integer source positions
/// are copied exactly, borders reflect.
fn warp(plane: &[f32], h: usize, w: usize, map: &dyn Fn(f32, f32) -> (f32, f32), interp: Interp) -> Vec<f32> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (sy, sx) = map(r as f32, c as f32);
            out.push(match interp {
                Interp::Bilinear => sample_bilinear(plane, h, w, sy, sx),
                Interp::Nearest => sample_nearest(plane, h, w, sy, sx),
            });
        }
    }
    out
}

/// Inverse of `p' = s R (p - c) + c + t`, rotating about the image center.
fn affine_inverse(a: &Affine, h: usize, w: usize) -> impl Fn(f32, f32) -> (f32, f32) {
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let (ty, tx) = (a.translate.1 * h as f32, a.translate.0 * w as f32);
    let theta = a.angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let s = a.scale;
    move |y, x| {
        let (dy, dx) = (y - cy - ty, x - cx - tx);
        // R(-theta) applied to (dx, dy)
        let sx = (cos * dx + sin * dy) / s;
        let sy = (-sin * dx + cos * dy) / s;
        (sy + cy, sx + cx)
    }
}

/// Knot pairs `(output, source)` along one axis of length `n`.
fn grid_axis(d: &[f32], n: usize) -> Vec<(f32, f32)> {
    let steps = d.len().max(1);
    let span = (n as f32 - 1.0).max(0.0);
    let mut cum = vec![0.0f32];
    for k in 0..steps {
        let step = 1.0 + d.get(k).copied().unwrap_or(0.0);
        cum.push(cum[k] + step);
    }
    let total = cum[steps];
    (0..=steps)
        .map(|k| (k as f32 * span / steps as f32, cum[k] / total * span))
        .collect()
}

fn piecewise(knots: &[(f32, f32)], v: f32) -> f32 {
    for pair in knots.windows(2) {
        let ((a0, b0), (a1, b1)) = (pair[0], pair[1]);
        if v <= a1 || pair[1] == *knots.last().expect("knots") {
            let t = if a1 > a0 { (v - a0) / (a1 - a0) } else { 0.0 };
            return b0 + t * (b1 - b0);
        }
    }
    v
}

fn color_jitter(planes: &mut [Vec<f32>; 3], c: &ColorJitter) {
    let n = planes[0].len();
    let gray = |p: &[Vec<f32>; 3], i: usize| 0.299 * p[0][i] + 0.587 * p[1][i] + 0.114 * p[2][i];
    for p in planes.iter_mut() {
        for v in p.iter_mut() {
            *v = (*v * c.brightness).clamp(0.0, 255.0);
        }
    }
    let mean = (0..n).map(|i| gray(planes, i)).sum::<f32>() / n.max(1) as f32;
    for p in planes.iter_mut() {
        for v in p.iter_mut() {
            *v = ((*v - mean) * c.contrast + mean).clamp(0.0, 255.0);
        }
    }
    for i in 0..n {
        let g = gray(planes, i);
        for p in planes.iter_mut() {
            p[i] = (g + (p[i] - g) * c.saturation).clamp(0.0, 255.0);
        }
    }
    if c.hue != 0.0 {
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            let (hh, s, v) = rgb_to_hsv(planes[0][i] / 255.0, planes[1][i] / 255.0, planes[2][i] / 255.0);
            let (r, g, b) = hsv_to_rgb(hh + c.hue, s, v);
            planes[0][i] = r * 255.0;
            planes[1][i] = g * 255.0;
            planes[2][i] = b * 255.0;
        }
    }
}
