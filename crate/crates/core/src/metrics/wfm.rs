//! Weighted F-measure with its exact Euclidean distance transform.

/// Squared distance and flat index of the nearest foreground pixel, for every pixel.
/// Among equally near foreground pixels the one with the smallest column wins, then
/// the smallest row. Without foreground every entry is `None`.
pub fn nearest_foreground(gt: &[bool], h: usize, w: usize) -> Vec<Option<(u64, usize)>> {
    // per column: nearest foreground row, preferring the upper one on ties
    let mut col_row: Vec<Option<usize>> = vec![None; h * w];
    for c in 0..w {
        let mut above: Option<usize> = None;
        for r in 0..h {
            if gt[r * w + c] {
                above = Some(r);
            }
            col_row[r * w + c] = above;
        }
        let mut below: Option<usize> = None;
        for r in (0..h).rev() {
            if gt[r * w + c] {
                below = Some(r);
            }
            let best = match (col_row[r * w + c], below) {
                (Some(a), Some(b)) => Some(if r - a <= b - r { a } else { b }),
                (a, b) => a.or(b),
            };
            col_row[r * w + c] = best;
        }
    }
    let mut out = vec![None; h * w];
    // per row: lower envelope of parabolas (c - q)^2 + f(q) over columns q
    let mut v: Vec<usize> = Vec::with_capacity(w);
    let mut z: Vec<(i128, i128)> = Vec::with_capacity(w + 1);
    for r in 0..h {
        let f = |q: usize| -> Option<i128> {
            col_row[r * w + q].map(|rr| {
                let d = rr as i128 - r as i128;
                d * d
            })
        };
        v.clear();
        z.clear();
        for q in 0..w {
            let Some(fq) = f(q) else { continue };
            loop {
                let Some(&p) = v.last() else {
                    v.push(q);
                    z.push((i128::MIN, 1));
                    break;
                };
                let fp = f(p).expect("envelope holds finite columns");
                let (qi, pi) = (q as i128, p as i128);
                // intersection s = num / den with den > 0
                let s = ((fq + qi * qi) - (fp + pi * pi), 2 * (qi - pi));
                let zk = *z.last().expect("paired with v");
                if v.len() > 1 && s.0 * zk.1 <= zk.0 * s.1 {
                    v.pop();
                    z.pop();
                } else {
                    v.push(q);
                    z.push(s);
                    break;
                }
            }
        }
        if v.is_empty() {
            continue;
        }
        let mut k = 0;
        for c in 0..w {
            let x = c as i128;
            // strictly past the boundary moves right, so ties stay with smaller columns
            while k + 1 < v.len() && z[k + 1].0 < x * z[k + 1].1 {
                k += 1;
            }
            let q = v[k];
            let rr = col_row[r * w + q].expect("finite column");
            let (dr, dc) = (rr as i64 - r as i64, q as i64 - c as i64);
            out[r * w + c] = Some(((dr * dr + dc * dc) as u64, rr * w + q));
        }
    }
    out
}

/// Normalized `size x size` Gaussian with standard deviation `sigma`.
pub fn gaussian_2d(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - half, (i % size) as f64 - half);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// 2-D filtering with edge-replicating borders.
pub fn filter_replicate(x: &[f64], h: usize, w: usize, kernel: &[f64], size: usize) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for i in 0..size {
                let rr = (r as isize + i as isize - half).clamp(0, h as isize - 1) as usize;
                for j in 0..size {
                    let cc = (c as isize + j as isize - half).clamp(0, w as isize - 1) as usize;
                    acc += kernel[i * size + j] * x[rr * w + cc];
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WfmParams {
    pub beta2: f64,
    pub kernel_size: usize,
    pub sigma: f64,
    /// Distance decay of the background weight.
    pub decay: f64,
}

impl Default for WfmParams {
    fn default() -> Self {
        Self {
            beta2: 1.0,
            kernel_size: 7,
            sigma: 5.0,
            decay: 0.5f64.ln() / 5.0,
        }
    }
}

/// Weighted F-measure of a continuous prediction.
///
/// Errors on the background take the error of their nearest foreground pixel, are
/// smoothed by a Gaussian where that lowers the error inside the object, and are
/// weighted by `2 - exp(decay * distance)` outside it. Without foreground the score
/// is one for an all-zero prediction and zero otherwise.
pub fn weighted_fbeta(pred: &[f64], gt: &[bool], h: usize, w: usize, params: &WfmParams) -> f64 {
    let fg_count = gt.iter().filter(|&&g| g).count();
    if fg_count == 0 {
        return if pred.iter().all(|&p| p <= 1e-8) { 1.0 } else { 0.0 };
    }
    let err: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (p - f64::from(u8::from(g))).abs())
        .collect();
    let nearest = nearest_foreground(gt, h, w);
    let et: Vec<f64> = (0..h * w)
        .map(|i| {
            if gt[i] {
                err[i]
            } else {
                err[nearest[i].expect("foreground exists").1]
            }
        })
        .collect();
    let kernel = gaussian_2d(params.kernel_size, params.sigma);
    let ea = filter_replicate(&et, h, w, &kernel, params.kernel_size);
    let (mut sum_fg, mut sum_bg) = (0.0, 0.0);
    for i in 0..h * w {
        if gt[i] {
            sum_fg += if ea[i] < err[i] { ea[i] } else { err[i] };
        } else {
            let dist = (nearest[i].expect("foreground exists").0 as f64).sqrt();
            sum_bg += err[i] * (2.0 - (params.decay * dist).exp());
        }
    }
    let eps = f64::EPSILON;
    let tp = fg_count as f64 - sum_fg;
    let recall = 1.0 - sum_fg / fg_count as f64;
    let precision = tp / (tp + sum_bg + eps);
    (1.0 + params.beta2) * recall * precision / (recall + params.beta2 * precision + eps)
}
