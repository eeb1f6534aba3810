//! Plane-level image operations on row-major `f32` grids.

use image::RgbImage;

/// Three `h*w` planes holding 0..=255 values.
pub fn rgb_planes(img: &RgbImage) -> [Vec<f32>; 3] {
    let n = (img.width() * img.height()) as usize;
    let mut planes = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for p in img.pixels() {
        for (c, plane) in planes.iter_mut().enumerate() {
            plane.push(p.0[c] as f32);
        }
    }
    planes
}

/// Rounds and clamps planes back into an 8-bit image.
pub fn planes_to_rgb(planes: &[Vec<f32>; 3], h: usize, w: usize) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| to_u8(planes[c][i])))
    })
}

pub fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Corner-aligned source taps `(i0, i1, frac)` for each output index.
pub fn interp_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    (0..n_out)
        .map(|i| {
            let src = if n_out > 1 {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            } else {
                0.0
            };
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Corner-aligned bilinear resize, the same interpolation as the network resize.
pub fn resize_bilinear(plane: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let rows = interp_taps(h, oh);
    let cols = interp_taps(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = plane[r0 * w + c0] * (1.0 - fc) + plane[r0 * w + c1] * fc;
            let bot = plane[r1 * w + c0] * (1.0 - fc) + plane[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    out
}

/// Nearest-neighbour resize with source index `floor(i * n_in / n_out)`.
pub fn resize_nearest(plane: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let r = (i * h / oh).min(h - 1);
        for j in 0..ow {
            let c = (j * w / ow).min(w - 1);
            out.push(plane[r * w + c]);
        }
    }
    out
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
pub fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub fn sample_bilinear(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |r: isize, c: isize| plane[reflect101(r, h) * w + reflect101(c, w)];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

pub fn sample_nearest(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let r = reflect101(y.round() as isize, h);
    let c = reflect101(x.round() as isize, w);
    plane[r * w + c]
}

/// Normalized 1-D Gaussian of odd length `size`.
pub fn gaussian_kernel(sigma: f32, size: usize) -> Vec<f32> {
    let half = (size / 2) as isize;
    let k: Vec<f32> = (-half..=half)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable convolution with reflect-101 borders.
pub fn blur_separable(plane: &[f32], h: usize, w: usize, kernel: &[f32]) -> Vec<f32> {
    let half = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[r * w + reflect101(c as isize + k as isize - half, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[reflect101(r as isize + k as isize - half, h) * w + c])
                .sum();
        }
    }
    out
}

/// RGB in `[0, 1]` to `(hue in [0, 1), saturation, value)`.
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
