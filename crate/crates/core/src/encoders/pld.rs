//! PLD+: local emphasis on every transformer stage followed by stepwise aggregation.

use candle_core::Tensor;

use crate::blocks::{LocalEmphasis, StepwiseAggregation};
use crate::encoders::MultiScaleFeatures;
use crate::error::Result;
use crate::params::Scope;

#[derive(Debug, Clone)]
pub struct PldPlus {
    le: Vec<LocalEmphasis>,
    sfa: StepwiseAggregation,
    width: usize,
}

impl PldPlus {
    pub fn new(scope: &Scope, stage_widths: [usize; 4], width: usize) -> Result<Self> {
        let le = stage_widths
            .iter()
            .enumerate()
            .map(|(j, &c)| LocalEmphasis::new(&scope.pp(format!("le{}", j + 1)), c, width))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            le,
            sfa: StepwiseAggregation::new(&scope.pp("sfa"), width)?,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// The four local-emphasis maps at `target` (the stride-4 grid).
    pub fn emphasize(&self, f: &MultiScaleFeatures, target: (usize, usize)) -> Result<Vec<Tensor>> {
        self.le
            .iter()
            .zip(&f.stages)
            .map(|(le, e)| le.forward(e, target))
            .collect()
    }

    pub fn aggregate(&self, maps: &[Tensor]) -> Result<Tensor> {
        self.sfa.forward([&maps[0], &maps[1], &maps[2], &maps[3]])
    }

    pub fn forward(&self, f: &MultiScaleFeatures, target: (usize, usize)) -> Result<Tensor> {
        self.aggregate(&self.emphasize(f, target)?)
    }
}
