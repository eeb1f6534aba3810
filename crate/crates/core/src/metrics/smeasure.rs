//! Structure measure: object-aware and region-aware similarity of a continuous map.

const EPS: f64 = f64::EPSILON;

fn mean(v: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (if n == 0 { 0.0 } else { s / n as f64 }, n)
}

/// `2 x / (x^2 + 1 + sigma + eps)` with `x` the mean and `sigma` the sample standard
/// deviation of `values`.
fn object_score(values: &[f64]) -> f64 {
    let (x, n) = mean(values.iter().copied());
    let sigma = if n > 1 {
        (values.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn object_term(pred: &[f64], gt: &[bool]) -> f64 {
    let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| !g)
        .map(|(&p, _)| 1.0 - p)
        .collect();
    let u = fg.len() as f64 / gt.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// SSIM-style similarity of one block; an empty block scores zero.
fn block_score(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let (x, _) = mean(pred.iter().copied());
    let (y, _) = mean(gt.iter().copied());
    let dof = (n.max(2) - 1) as f64;
    let sx = pred.iter().map(|p| (p - x).powi(2)).sum::<f64>() / dof;
    let sy = gt.iter().map(|g| (g - y).powi(2)).sum::<f64>() / dof;
    let sxy = pred.iter().zip(gt).map(|(p, g)| (p - x) * (g - y)).sum::<f64>() / dof;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// One-based split point `(row, col)`: the rounded foreground centroid plus one, ties
/// rounding to even.
pub fn split_point(gt: &[bool], h: usize, w: usize) -> (usize, usize) {
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
    for (i, _) in gt.iter().enumerate().filter(|(_, &g)| g) {
        sr += (i / w) as f64;
        sc += (i % w) as f64;
        n += 1;
    }
    if n == 0 {
        return (
            (h as f64 / 2.0).round_ties_even() as usize,
            (w as f64 / 2.0).round_ties_even() as usize,
        );
    }
    (
        (sr / n as f64).round_ties_even() as usize + 1,
        (sc / n as f64).round_ties_even() as usize + 1,
    )
}

fn region_term(pred: &[f64], gt: &[bool], h: usize, w: usize) -> f64 {
    let (y, x) = split_point(gt, h, w);
    let area = (h * w) as f64;
    let block = |r0: usize, r1: usize, c0: usize, c1: usize| {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                p.push(pred[r * w + c]);
                g.push(f64::from(u8::from(gt[r * w + c])));
            }
        }
        block_score(&p, &g)
    };
    let w1 = (x * y) as f64 / area;
    let w2 = (y * (w - x)) as f64 / area;
    let w3 = ((h - y) * x) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    w1 * block(0, y, 0, x) + w2 * block(0, y, x, w) + w3 * block(y, h, 0, x) + w4 * block(y, h, x, w)
}

/// Structure measure with object weight `alpha`. An all-background truth scores
/// `1 - mean(pred)`, an all-foreground truth `mean(pred)`.
pub fn s_measure(pred: &[f64], gt: &[bool], h: usize, w: usize, alpha: f64) -> f64 {
    let fg = gt.iter().filter(|&&g| g).count();
    let (mp, _) = mean(pred.iter().copied());
    if fg == 0 {
        return 1.0 - mp;
    }
    if fg == gt.len() {
        return mp;
    }
    let s = alpha * object_term(pred, gt) + (1.0 - alpha) * region_term(pred, gt, h, w);
    s.max(0.0)
}
