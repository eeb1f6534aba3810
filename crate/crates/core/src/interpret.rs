//! Feature-map summaries, Grad-CAM heatmaps and the comparison panel.
//!
//! A panel row shows the image, its mask, the mask blended over the image, then one
//! heatmap per requested layer. Encoder and first fuse-stage columns show feature
//! summaries; decoder, fuse and head columns show Grad-CAM, with the sum of predicted
//! foreground probabilities as the target. Heatmaps use the viridis colormap.

use std::path::Path;

use candle_core::{DType, Tensor};
use image::{GrayImage, Rgb, RgbImage};

use crate::data::imageops::{resize_bilinear, resize_nearest};
use crate::data::{batch_tensors, normalize_resize, SegmentationSample};
use crate::error::{Error, Result};
use crate::models::{ForwardOptions, Segmenter};

/// A `height x width` grid in `[0, 1]` and the layer it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub data: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub source: String,
}

impl Heatmap {
    pub fn zeros(height: usize, width: usize, source: &str) -> Self {
        Self {
            data: vec![0.0; height * width],
            height,
            width,
            source: source.to_string(),
        }
    }
}

/// Rescales to `[0, 1]`; a constant input maps to zeros.
pub fn min_max(v: &[f32]) -> Vec<f32> {
    let (lo, hi) = v.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

/// `(channels, h, w)` values of the first batch element of a feature map.
fn channels(fm: &Tensor) -> Result<(Vec<Vec<f32>>, usize, usize)> {
    let fm = match fm.rank() {
        4 => fm.get(0)?,
        3 => fm.clone(),
        r => return Err(Error::Shape(format!("feature map of rank {r}"))),
    };
    let (c, h, w) = fm.dims3()?;
    let flat: Vec<f32> = fm.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok((flat.chunks(h * w).map(<[f32]>::to_vec).take(c).collect(), h, w))
}

/// Every channel min-max scaled, summed, the sum min-max scaled again and resized to
/// `size` (corner-aligned bilinear).
pub fn feature_summary(fm: &Tensor, size: (usize, usize), source: &str) -> Result<Heatmap> {
    let (chans, h, w) = channels(fm)?;
    let mut sum = vec![0.0f32; h * w];
    for ch in &chans {
        for (s, v) in sum.iter_mut().zip(min_max(ch)) {
            *s += v;
        }
    }
    Ok(resized(min_max(&sum), h, w, size, source))
}

fn resized(v: Vec<f32>, h: usize, w: usize, size: (usize, usize), source: &str) -> Heatmap {
    let data = if (h, w) == size {
        v
    } else {
        resize_bilinear(&v, h, w, size.0, size.1)
            .into_iter()
            .map(|x| x.clamp(0.0, 1.0))
            .collect()
    };
    Heatmap {
        data,
        height: size.0,
        width: size.1,
        source: source.to_string(),
    }
}

/// `ReLU(sum_c mean(grad_c) * act_c)`, min-max scaled and resized to `size`.
pub fn cam_from_gradients(
    activation: &Tensor,
    gradient: &Tensor,
    size: (usize, usize),
    source: &str,
) -> Result<Heatmap> {
    let (acts, h, w) = channels(activation)?;
    let (grads, gh, gw) = channels(gradient)?;
    if (gh, gw, grads.len()) != (h, w, acts.len()) {
        return Err(Error::Shape("activation and gradient shapes differ".into()));
    }
    let mut cam = vec![0.0f32; h * w];
    for (a, g) in acts.iter().zip(&grads) {
        let weight = g.iter().map(|&x| x as f64).sum::<f64>() / (h * w) as f64;
        for (c, &x) in cam.iter_mut().zip(a) {
            *c += (weight * x as f64) as f32;
        }
    }
    cam.iter_mut().for_each(|c| *c = c.max(0.0));
    Ok(resized(min_max(&cam), h, w, size, source))
}

/// Grad-CAM at tap `layer` for a single `(1, 3, H, W)` image.
pub fn grad_cam(model: &Segmenter, layer: &str, image: &Tensor) -> Result<Heatmap> {
    let (_, _, h, w) = image.dims4()?;
    let opts = ForwardOptions {
        leaf: Some(layer.to_string()),
        ..ForwardOptions::eval()
    };
    let out = model.forward_with(image, &opts)?;
    let leaf = out.leaf.ok_or_else(|| Error::UnknownLayer {
        id: layer.to_string(),
        valid: model.tap_ids().iter().map(|s| s.to_string()).collect(),
    })?;
    let grads = out.prob.sum_all()?.backward()?;
    let grad = match grads.get(leaf.as_tensor()) {
        Some(g) => g.clone(),
        None => leaf.as_tensor().zeros_like()?,
    };
    cam_from_gradients(leaf.as_tensor(), &grad, (h, w), layer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Summary,
    GradCam,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Column {
    Image,
    Mask,
    Blend,
    Layer { id: String, method: Method },
}

/// The full ten-column layout.
pub const DEFAULT_COLUMNS: [&str; 10] = [
    "image", "mask", "blend", "e1_1", "e2_1", "f1", "d1", "d2", "fuse", "head",
];

impl Column {
    /// `image`, `mask`, `blend`, a tap id with its default method, or a tap id with an
    /// explicit `feat:` or `cam:` prefix.
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "image" => Column::Image,
            "mask" => Column::Mask,
            "blend" => Column::Blend,
            _ => {
                let (method, id) = if let Some(id) = s.strip_prefix("feat:") {
                    (Method::Summary, id)
                } else if let Some(id) = s.strip_prefix("cam:") {
                    (Method::GradCam, id)
                } else {
                    let m = if matches!(s, "e1_1" | "e2_1" | "f1") {
                        Method::Summary
                    } else {
                        Method::GradCam
                    };
                    (m, s)
                };
                if !crate::models::TAP_IDS.contains(&id) {
                    let mut valid: Vec<String> = ["image", "mask", "blend"].map(String::from).to_vec();
                    valid.extend(crate::models::TAP_IDS.iter().map(|s| s.to_string()));
                    return Err(Error::UnknownLayer {
                        id: s.to_string(),
                        valid,
                    });
                }
                Column::Layer {
                    id: id.to_string(),
                    method,
                }
            }
        })
    }
}

pub fn viridis(v: f32) -> Rgb<u8> {
    let c = colorous::VIRIDIS.eval_continuous(v.clamp(0.0, 1.0) as f64);
    Rgb([c.r, c.g, c.b])
}

/// Mask color used in the blend column.
pub const MASK_COLOR: Rgb<u8> = Rgb([0, 255, 0]);

/// Inside the mask: `0.5 * image + 0.5 * MASK_COLOR`; elsewhere the image.
pub fn blend(image: &RgbImage, mask: &GrayImage) -> RgbImage {
    RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let p = image.get_pixel(x, y);
        if mask.get_pixel(x, y).0[0] > 0 {
            Rgb(std::array::from_fn(|c| {
                ((p.0[c] as f32 + MASK_COLOR.0[c] as f32) * 0.5).round() as u8
            }))
        } else {
            *p
        }
    })
}

pub fn colorize(map: &Heatmap) -> RgbImage {
    RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        viridis(map.data[y as usize * map.width + x as usize])
    })
}

/// Gap between panel cells, in pixels.
pub const GUTTER: u32 = 4;

/// Lays `cells` out left to right on a white background.
pub fn hstack(cells: &[RgbImage]) -> RgbImage {
    let h = cells.iter().map(RgbImage::height).max().unwrap_or(0);
    let w = cells.iter().map(RgbImage::width).sum::<u32>() + GUTTER * cells.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut x0 = 0;
    for c in cells {
        image::imageops::replace(&mut out, c, x0 as i64, 0);
        x0 += c.width() + GUTTER;
    }
    out
}

/// Panel row for one sample, rendered at the network input size.
pub fn render_panel(
    model: &Segmenter,
    sample: &SegmentationSample,
    columns: &[Column],
    size: usize,
) -> Result<RgbImage> {
    if columns.is_empty() {
        return Err(Error::Config("a panel needs at least one column".into()));
    }
    let prepared = normalize_resize(sample, size);
    let (x, _) = batch_tensors(std::slice::from_ref(&prepared), model.dtype(), model.device())?;
    let (h0, w0) = sample.original_size;
    let planes = crate::data::imageops::rgb_planes(&sample.image);
    let small: [Vec<f32>; 3] = std::array::from_fn(|c| resize_bilinear(&planes[c], h0, w0, size, size));
    let image = crate::data::imageops::planes_to_rgb(&small, size, size);
    let mask_plane: Vec<f32> = sample.mask.pixels().map(|p| p.0[0] as f32).collect();
    let mask_small = resize_nearest(&mask_plane, h0, w0, size, size);
    let mask = GrayImage::from_fn(size as u32, size as u32, |x, y| {
        image::Luma([u8::from(mask_small[y as usize * size + x as usize] > 0.5)])
    });

    let need_taps = columns.iter().any(|c| {
        matches!(
            c,
            Column::Layer {
                method: Method::Summary,
                ..
            }
        )
    });
    let taps = if need_taps {
        Some(model.forward_with(&x, &ForwardOptions::eval())?.taps)
    } else {
        None
    };
    let mut cells = Vec::with_capacity(columns.len());
    for col in columns {
        cells.push(match col {
            Column::Image => image.clone(),
            Column::Mask => RgbImage::from_fn(size as u32, size as u32, |x, y| {
                let v = mask.get_pixel(x, y).0[0] * 255;
                Rgb([v, v, v])
            }),
            Column::Blend => blend(&image, &mask),
            Column::Layer {
                id,
                method: Method::Summary,
            } => {
                let taps = taps.as_ref().expect("taps recorded");
                let fm = taps.get(id.as_str()).ok_or_else(|| Error::UnknownLayer {
                    id: id.clone(),
                    valid: model.tap_ids().iter().map(|s| s.to_string()).collect(),
                })?;
                colorize(&feature_summary(fm, (size, size), id)?)
            }
            Column::Layer {
                id,
                method: Method::GradCam,
            } => colorize(&grad_cam(model, id, &x)?),
        });
    }
    Ok(hstack(&cells))
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
