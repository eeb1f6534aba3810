//! One-cycle learning-rate schedule: cosine warmup to the peak, then cosine anneal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OneCycleConfig {
    /// Fraction of the run spent warming up.
    pub pct_start: f64,
    /// Initial rate is `max_lr / div_factor`.
    pub div_factor: f64,
    /// Final rate is the initial rate divided by this.
    pub final_div_factor: f64,
}

impl Default for OneCycleConfig {
    fn default() -> Self {
        Self {
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneCycle {
    max_lr: f64,
    total_steps: usize,
    warmup_steps: usize,
    initial_lr: f64,
    min_lr: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize, cfg: OneCycleConfig) -> Result<Self> {
        if !(max_lr > 0.0 && max_lr.is_finite()) {
            return Err(Error::Config(format!(
                "max learning rate must be positive, got {max_lr}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&cfg.pct_start) || cfg.div_factor < 1.0 || cfg.final_div_factor < 1.0 {
            return Err(Error::Config(format!("invalid one-cycle settings {cfg:?}")));
        }
        let warmup_steps = ((cfg.pct_start * total_steps as f64 + 1e-9).floor() as usize).min(total_steps - 1);
        let initial_lr = max_lr / cfg.div_factor;
        Ok(Self {
            max_lr,
            total_steps,
            warmup_steps,
            initial_lr,
            min_lr: initial_lr / cfg.final_div_factor,
        })
    }

    pub fn max_lr(&self) -> f64 {
        self.max_lr
    }

    pub fn initial_lr(&self) -> f64 {
        self.initial_lr
    }

    pub fn min_lr(&self) -> f64 {
        self.min_lr
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Step at which the peak is reached.
    pub fn peak_step(&self) -> usize {
        self.warmup_steps
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::Config(format!(
                "step {step} outside a schedule of {} steps",
                self.total_steps
            )));
        }
        let (w, last) = (self.warmup_steps, self.total_steps - 1);
        // both branches are written so the peak evaluates to exactly `max_lr`
        Ok(if step < w {
            let c = (std::f64::consts::PI * step as f64 / w as f64).cos();
            self.max_lr - (self.max_lr - self.initial_lr) * (1.0 + c) / 2.0
        } else if last == w {
            self.max_lr
        } else {
            let c = (std::f64::consts::PI * (step - w) as f64 / (last - w) as f64).cos();
            self.max_lr - (self.max_lr - self.min_lr) * (1.0 - c) / 2.0
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_points() {
        let s = OneCycle::new(1e-4, 200, OneCycleConfig::default()).unwrap();
        assert_eq!(s.peak_step(), 60);
        assert_eq!(s.lr(60).unwrap(), 1e-4);
        assert!((s.lr(0).unwrap() - 4e-6).abs() < 1e-18);
        let last = s.lr(199).unwrap();
        assert!(last < 1e-6 && (last - 4e-10).abs() < 1e-20);
        assert!(s.lr(200).is_err());
        let peak = (0..200).map(|i| s.lr(i).unwrap()).fold(0.0, f64::max);
        assert_eq!(peak, 1e-4);
    }

    #[test]
    fn short_runs() {
        let one = OneCycle::new(1e-3, 1, OneCycleConfig::default()).unwrap();
        assert_eq!(one.lr(0).unwrap(), 1e-3);
        let three = OneCycle::new(1e-3, 3, OneCycleConfig::default()).unwrap();
        assert_eq!(three.lr(0).unwrap(), 1e-3);
        assert!(three.lr(2).unwrap() < 1e-6);
        assert!(OneCycle::new(1e-3, 0, OneCycleConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn peak_is_exact_and_steps_are_small(total in 1usize..3000, max_lr in 1e-6f64..1.0) {
            let s = OneCycle::new(max_lr, total, OneCycleConfig::default()).unwrap();
            let lrs: Vec<f64> = (0..total).map(|i| s.lr(i).unwrap()).collect();
            prop_assert_eq!(lrs.iter().cloned().fold(0.0, f64::max), max_lr);
            prop_assert!(lrs.iter().all(|&v| v > 0.0 && v <= max_lr));
            for p in lrs.windows(2) {
                prop_assert!((p[1] - p[0]).abs() < max_lr);
            }
            // rises until the peak, falls afterwards
            let k = s.peak_step();
            prop_assert!(lrs[..=k].windows(2).all(|p| p[1] >= p[0]));
            prop_assert!(lrs[k..].windows(2).all(|p| p[1] <= p[0]));
        }
    }
}
