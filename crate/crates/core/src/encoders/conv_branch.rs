//! The convolution branch: a residual encoder over six resolution levels and its
//! U-Net style decoder.

use candle_core::Tensor;

use crate::blocks::{ResBlock, ResBlock2};
use crate::encoders::{check_divisible, Encoder, EncoderOutput, MultiScaleFeatures};
use crate::error::{Error, Result};
use crate::nn::{concat, resize, Conv2d, ConvSpec};
use crate::params::Scope;

pub const LEVELS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBranchConfig {
    pub name: &'static str,
    /// Width per level, strides 1 through 32.
    pub widths: [usize; LEVELS],
    /// Channels of the decoder output at full resolution.
    pub out_width: usize,
}

impl ConvBranchConfig {
    pub fn standard() -> Self {
        Self {
            name: "cb_e",
            widths: [16, 32, 64, 128, 256, 512],
            out_width: 32,
        }
    }

    pub fn tiny() -> Self {
        Self {
            name: "cb_e_tiny",
            widths: [4, 8, 16, 32, 64, 128],
            out_width: 8,
        }
    }

    /// Widths scaled by `factor`, rounded and kept at least 2.
    pub fn scaled(factor: f64) -> Self {
        let mut cfg = Self::standard();
        for w in &mut cfg.widths {
            *w = ((*w as f64 * factor).round() as usize).max(2);
        }
        cfg.out_width = ((32.0 * factor).round() as usize).max(2);
        cfg
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        [self.widths[2], self.widths[3], self.widths[4], self.widths[5]]
    }
}

#[derive(Debug, Clone)]
struct Level {
    blocks: [ResBlock; 2],
    down: Option<Conv2d>,
}

/// `CB_E`: stem convolution, then per level two residual blocks followed (except at
/// the last level) by a stride-2 convolution.
#[derive(Debug, Clone)]
pub struct ConvBranchEncoder {
    config: ConvBranchConfig,
    stem: Conv2d,
    levels: Vec<Level>,
}

impl ConvBranchEncoder {
    pub fn new(scope: &Scope, config: ConvBranchConfig) -> Result<Self> {
        let w = config.widths;
        let stem = Conv2d::new(&scope.pp("stem"), 3, w[0], ConvSpec::k3())?;
        let mut levels = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let s = scope.pp(format!("level{l}"));
            let c_in = if l == 0 { w[0] } else { w[l - 1] };
            let blocks = [
                ResBlock::new(&s.pp("rb0"), c_in, w[l])?,
                ResBlock::new(&s.pp("rb1"), w[l], w[l])?,
            ];
            let down = if l + 1 < LEVELS {
                Some(Conv2d::new(&s.pp("down"), w[l], w[l], ConvSpec::k3().stride(2))?)
            } else {
                None
            };
            levels.push(Level { blocks, down });
        }
        Ok(Self { config, stem, levels })
    }

    pub fn config(&self) -> &ConvBranchConfig {
        &self.config
    }

    /// The six level outputs at strides 1, 2, 4, 8, 16 and 32.
    pub fn skips(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        check_divisible(image)?;
        let mut h = self.stem.forward(image)?;
        let mut out = Vec::with_capacity(LEVELS);
        for level in &self.levels {
            for b in &level.blocks {
                h = b.forward(&h)?;
            }
            out.push(h.clone());
            if let Some(down) = &level.down {
                h = down.forward(&h)?;
            }
        }
        Ok(out)
    }
}

impl Encoder for ConvBranchEncoder {
    fn name(&self) -> &str {
        self.config.name
    }

    fn stage_widths(&self) -> [usize; 4] {
        self.config.stage_widths()
    }

    fn encode(&self, image: &Tensor, _train: bool) -> Result<EncoderOutput> {
        let skips = self.skips(image)?;
        let features = MultiScaleFeatures {
            stages: [skips[2].clone(), skips[3].clone(), skips[4].clone(), skips[5].clone()],
        };
        Ok(EncoderOutput { features, skips })
    }
}

/// `CB_D`: starting from the deepest skip, repeatedly upsample to the next shallower
/// skip, concatenate it and apply `RB²`. The final level emits `out_width` channels.
#[derive(Debug, Clone)]
pub struct ConvBranchDecoder {
    steps: Vec<ResBlock2>,
    widths: [usize; LEVELS],
    out_width: usize,
}

impl ConvBranchDecoder {
    pub fn new(scope: &Scope, config: &ConvBranchConfig) -> Result<Self> {
        let w = config.widths;
        let mut steps = Vec::with_capacity(LEVELS - 1);
        let mut carried = w[LEVELS - 1];
        for l in (0..LEVELS - 1).rev() {
            let out = if l == 0 { config.out_width } else { w[l] };
            steps.push(ResBlock2::new(&scope.pp(format!("up{l}")), carried + w[l], out)?);
            carried = out;
        }
        Ok(Self {
            steps,
            widths: w,
            out_width: config.out_width,
        })
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }

    pub fn forward(&self, skips: &[Tensor]) -> Result<Tensor> {
        if skips.len() != LEVELS {
            return Err(Error::Shape(format!(
                "convolution decoder needs {LEVELS} skips, got {}",
                skips.len()
            )));
        }
        for (l, (s, w)) in skips.iter().zip(self.widths).enumerate() {
            if s.dim(1)? != w {
                return Err(Error::Shape(format!(
                    "skip {l} has {} channels, expected {w}",
                    s.dim(1)?
                )));
            }
        }
        let mut h = skips[LEVELS - 1].clone();
        for (step, l) in self.steps.iter().zip((0..LEVELS - 1).rev()) {
            let skip = &skips[l];
            let (_, _, sh, sw) = skip.dims4()?;
            let up = resize(&h, (sh, sw))?;
            h = step.forward(&concat(&[&up, skip])?)?;
        }
        Ok(h)
    }
}
