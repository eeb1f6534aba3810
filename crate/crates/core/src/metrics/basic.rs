//! Confusion counts and the metrics that depend on them only.

/// Pixel is foreground iff `p >= t`.
pub fn binarize(pred: &[f64], t: f64) -> Vec<bool> {
    pred.iter().map(|&p| p >= t).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    pub fn from_masks(bin: &[bool], gt: &[bool]) -> Self {
        let mut c = Counts::default();
        for (&b, &g) in bin.iter().zip(gt) {
            match (b, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2|B∩G| / (|B| + |G|)`; one when both are empty.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    /// `|B∩G| / |B∪G|`; one when both are empty.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    /// Enhanced-alignment measure of a binary prediction. Every pixel of one
    /// (prediction, truth) combination has the same alignment value, so the mean over
    /// pixels is a count-weighted sum of four terms. An all-background truth scores the
    /// background fraction of the prediction, an all-foreground truth its foreground
    /// fraction.
    pub fn e_measure(&self, eps: f64) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 1.0;
        }
        let fg = self.tp + self.fn_;
        if fg == 0 {
            return self.tn as f64 / n;
        }
        if fg == self.total() {
            return self.tp as f64 / n;
        }
        let mean_b = (self.tp + self.fp) as f64 / n;
        let mean_g = fg as f64 / n;
        let term = |b: f64, g: f64| {
            let (pb, pg) = (b - mean_b, g - mean_g);
            let align = 2.0 * pb * pg / (pb * pb + pg * pg + eps);
            (align + 1.0).powi(2) / 4.0
        };
        (self.tp as f64 * term(1.0, 1.0)
            + self.fp as f64 * term(1.0, 0.0)
            + self.fn_ as f64 * term(0.0, 1.0)
            + self.tn as f64 * term(0.0, 0.0))
            / n
    }
}

/// Mean absolute difference between the continuous prediction and the truth.
pub fn mae(pred: &[f64], gt: &[bool]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter()
        .zip(gt)
        .map(|(&p, &g)| (p - f64::from(u8::from(g))).abs())
        .sum::<f64>()
        / pred.len() as f64
}

/// Confusion counts for many thresholds at once: pixels are sorted once and each
/// threshold is located by binary search.
pub struct ThresholdCounter {
    fg: Vec<f64>,
    bg: Vec<f64>,
}

impl ThresholdCounter {
    pub fn new(pred: &[f64], gt: &[bool]) -> Self {
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for (&p, &g) in pred.iter().zip(gt) {
            if g {
                fg.push(p);
            } else {
                bg.push(p);
            }
        }
        fg.sort_by(f64::total_cmp);
        bg.sort_by(f64::total_cmp);
        Self { fg, bg }
    }

    pub fn counts(&self, t: f64) -> Counts {
        let below_fg = self.fg.partition_point(|&p| p < t);
        let below_bg = self.bg.partition_point(|&p| p < t);
        Counts {
            tp: self.fg.len() - below_fg,
            fn_: below_fg,
            fp: self.bg.len() - below_bg,
            tn: below_bg,
        }
    }
}
