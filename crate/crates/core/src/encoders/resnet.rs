//! Bottleneck ResNet with stride on the 3x3 convolution. Stage outputs are taken after
//! the final ReLU of each layer.

use candle_core::Tensor;

use crate::encoders::{check_divisible, Encoder, EncoderOutput, MultiScaleFeatures};
use crate::error::Result;
use crate::nn::{max_pool_3x3_s2_nonneg, BatchNorm, Conv2d, ConvSpec};
use crate::params::Scope;

const EXPANSION: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ResNetConfig {
    pub name: &'static str,
    pub stem_width: usize,
    /// Bottleneck inner widths; stage outputs are four times these.
    pub planes: [usize; 4],
    pub blocks: [usize; 4],
}

impl ResNetConfig {
    pub fn resnet50() -> Self {
        Self {
            name: "resnet50",
            stem_width: 64,
            planes: [64, 128, 256, 512],
            blocks: [3, 4, 6, 3],
        }
    }

    pub fn tiny() -> Self {
        Self {
            name: "tiny_conv",
            stem_width: 16,
            planes: [4, 8, 16, 32],
            blocks: [1, 1, 1, 1],
        }
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        self.planes.map(|p| p * EXPANSION)
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new(scope: &Scope, c_in: usize, c_out: usize, spec: ConvSpec, name: &str, bn: &str) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&scope.pp(name), c_in, c_out, spec.no_bias())?,
            bn: BatchNorm::new(&scope.pp(bn), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward_t(&self.conv.forward(x)?, train)
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: ConvBn,
    spatial: ConvBn,
    expand: ConvBn,
    downsample: Option<ConvBn>,
}

impl Bottleneck {
    fn new(scope: &Scope, c_in: usize, planes: usize, stride: usize) -> Result<Self> {
        let out = planes * EXPANSION;
        let downsample = if stride != 1 || c_in != out {
            Some(ConvBn::new(
                &scope.pp("downsample"),
                c_in,
                out,
                ConvSpec::k1().stride(stride),
                "0",
                "1",
            )?)
        } else {
            None
        };
        Ok(Self {
            reduce: ConvBn::new(scope, c_in, planes, ConvSpec::k1(), "conv1", "bn1")?,
            spatial: ConvBn::new(scope, planes, planes, ConvSpec::k3().stride(stride), "conv2", "bn2")?,
            expand: ConvBn::new(scope, planes, out, ConvSpec::k1(), "conv3", "bn3")?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.reduce.forward(x, train)?.relu()?;
        let h = self.spatial.forward(&h, train)?.relu()?;
        let h = self.expand.forward(&h, train)?;
        let identity = match &self.downsample {
            Some(d) => d.forward(x, train)?,
            None => x.clone(),
        };
        Ok((h + identity)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct ResNetEncoder {
    config: ResNetConfig,
    stem: ConvBn,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNetEncoder {
    pub fn new(scope: &Scope, config: ResNetConfig) -> Result<Self> {
        let stem_spec = ConvSpec {
            kernel: 7,
            stride: 2,
            padding: 3,
            groups: 1,
            bias: false,
        };
        let stem = ConvBn::new(scope, 3, config.stem_width, stem_spec, "conv1", "bn1")?;
        let mut c_in = config.stem_width;
        let mut layers = Vec::with_capacity(4);
        for j in 0..4 {
            let s = scope.pp(format!("layer{}", j + 1));
            let stride = if j == 0 { 1 } else { 2 };
            let blocks = (0..config.blocks[j])
                .map(|i| {
                    Bottleneck::new(
                        &s.pp(i),
                        if i == 0 { c_in } else { config.planes[j] * EXPANSION },
                        config.planes[j],
                        if i == 0 { stride } else { 1 },
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            c_in = config.planes[j] * EXPANSION;
            layers.push(blocks);
        }
        Ok(Self { config, stem, layers })
    }
}

impl Encoder for ResNetEncoder {
    fn name(&self) -> &str {
        self.config.name
    }

    fn stage_widths(&self) -> [usize; 4] {
        self.config.stage_widths()
    }

    fn encode(&self, image: &Tensor, train: bool) -> Result<EncoderOutput> {
        check_divisible(image)?;
        let h = self.stem.forward(image, train)?.relu()?;
        let mut h = max_pool_3x3_s2_nonneg(&h)?;
        let mut outs = Vec::with_capacity(4);
        for layer in &self.layers {
            for b in layer {
                h = b.forward(&h, train)?;
            }
            outs.push(h.clone());
        }
        let stages: [Tensor; 4] = outs.try_into().expect("four layers");
        Ok(EncoderOutput {
            features: MultiScaleFeatures { stages },
            skips: Vec::new(),
        })
    }
}
