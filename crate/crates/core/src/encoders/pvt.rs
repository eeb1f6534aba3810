//! Pyramid vision transformer (v2 style): overlapping patch embeddings,
//! spatial-reduction attention and a convolutional feed-forward network.

use candle_core::{Tensor, D};

use crate::encoders::{check_divisible, Encoder, EncoderOutput, MultiScaleFeatures};
use crate::error::{Error, Result};
use crate::nn::{map_to_tokens, tokens_to_map, Conv2d, ConvSpec, DepthwiseConv3, LayerNorm, Linear};
use crate::params::Scope;

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PvtConfig {
    pub name: &'static str,
    pub widths: [usize; 4],
    pub heads: [usize; 4],
    pub mlp_ratios: [usize; 4],
    pub depths: [usize; 4],
    pub sr_ratios: [usize; 4],
}

impl PvtConfig {
    /// The B3 configuration.
    pub fn b3() -> Self {
        Self {
            name: "pvtv2_b3",
            widths: [64, 128, 320, 512],
            heads: [1, 2, 5, 8],
            mlp_ratios: [8, 8, 4, 4],
            depths: [3, 4, 18, 3],
            sr_ratios: [8, 4, 2, 1],
        }
    }

    /// One block per stage at widths up to 128.
    pub fn tiny() -> Self {
        Self {
            name: "tiny_vit",
            widths: [16, 32, 64, 128],
            heads: [1, 2, 4, 8],
            mlp_ratios: [2, 2, 2, 2],
            depths: [1, 1, 1, 1],
            sr_ratios: [8, 4, 2, 1],
        }
    }

    fn validate(&self) -> Result<()> {
        for j in 0..4 {
            if self.heads[j] == 0 || !self.widths[j].is_multiple_of(self.heads[j]) {
                return Err(Error::Config(format!(
                    "stage {} width {} is not divisible by {} heads",
                    j + 1,
                    self.widths[j],
                    self.heads[j]
                )));
            }
            if self.sr_ratios[j] == 0 || self.mlp_ratios[j] == 0 {
                return Err(Error::Config(format!(
                    "stage {} has a zero reduction or mlp ratio",
                    j + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct PatchEmbed {
    conv: Conv2d,
    norm: LayerNorm,
}

impl PatchEmbed {
    fn new(scope: &Scope, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let spec = ConvSpec {
            kernel,
            stride,
            padding: kernel / 2,
            groups: 1,
            bias: true,
        };
        Ok(Self {
            conv: Conv2d::new(&scope.pp("proj"), c_in, c_out, spec)?,
            norm: LayerNorm::new(&scope.pp("norm"), c_out, LN_EPS)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, usize, usize)> {
        let y = self.conv.forward(x)?;
        let (_, _, h, w) = y.dims4()?;
        Ok((self.norm.forward(&map_to_tokens(&y)?)?, h, w))
    }
}

/// Multi-head attention whose keys and values come from a spatially reduced copy of
/// the token map.
#[derive(Debug, Clone)]
pub struct SpatialReductionAttention {
    q: Linear,
    // no bias: a shared key offset cancels in the softmax
    k: Linear,
    v: Linear,
    proj: Linear,
    reduce: Option<(Conv2d, LayerNorm)>,
    heads: usize,
    scale: f64,
}

impl SpatialReductionAttention {
    pub fn new(scope: &Scope, dim: usize, heads: usize, sr_ratio: usize) -> Result<Self> {
        let reduce = if sr_ratio > 1 {
            let spec = ConvSpec {
                kernel: sr_ratio,
                stride: sr_ratio,
                padding: 0,
                groups: 1,
                bias: true,
            };
            Some((
                Conv2d::new(&scope.pp("sr"), dim, dim, spec)?,
                LayerNorm::new(&scope.pp("sr_norm"), dim, LN_EPS)?,
            ))
        } else {
            None
        };
        Ok(Self {
            q: Linear::new(&scope.pp("q"), dim, dim, true)?,
            k: Linear::new(&scope.pp("k"), dim, dim, false)?,
            v: Linear::new(&scope.pp("v"), dim, dim, true)?,
            proj: Linear::new(&scope.pp("proj"), dim, dim, true)?,
            reduce,
            heads,
            scale: 1.0 / ((dim / heads) as f64).sqrt(),
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Attention weights `(b, heads, n, m)` and head-split values `(b, heads, m, d)`.
    pub fn weights(&self, x: &Tensor, h: usize, w: usize) -> Result<(Tensor, Tensor)> {
        let source = match &self.reduce {
            Some((conv, norm)) => {
                let reduced = conv.forward(&tokens_to_map(x, h, w)?)?;
                norm.forward(&map_to_tokens(&reduced)?)?
            }
            None => x.clone(),
        };
        let q = self.split_heads(&self.q.forward(x)?)?;
        let k = self.split_heads(&self.k.forward(&source)?)?;
        let v = self.split_heads(&self.v.forward(&source)?)?;
        let logits = (q.matmul(&k.t()?.contiguous()?)? * self.scale)?;
        Ok((candle_nn::ops::softmax(&logits, D::Minus1)?, v))
    }

    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let (attn, v) = self.weights(x, h, w)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
struct MixFfn {
    fc1: Linear,
    dw: DepthwiseConv3,
    fc2: Linear,
}

impl MixFfn {
    fn new(scope: &Scope, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&scope.pp("fc1"), dim, hidden, true)?,
            dw: DepthwiseConv3::new(&scope.pp("dwconv"), hidden)?,
            fc2: Linear::new(&scope.pp("fc2"), hidden, dim, true)?,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let y = self.fc1.forward(x)?;
        let y = map_to_tokens(&self.dw.forward(&tokens_to_map(&y, h, w)?)?)?;
        self.fc2.forward(&y.gelu_erf()?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: SpatialReductionAttention,
    norm2: LayerNorm,
    ffn: MixFfn,
}

impl Block {
    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, h, w)?)?;
        Ok((&x + self.ffn.forward(&self.norm2.forward(&x)?, h, w)?)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    embed: PatchEmbed,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct PvtEncoder {
    config: PvtConfig,
    stages: Vec<Stage>,
}

impl PvtEncoder {
    pub fn new(scope: &Scope, config: PvtConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut c_in = 3;
        for j in 0..4 {
            let s = scope.pp(format!("stage{}", j + 1));
            let dim = config.widths[j];
            let (kernel, stride) = if j == 0 { (7, 4) } else { (3, 2) };
            let embed = PatchEmbed::new(&s.pp("patch_embed"), c_in, dim, kernel, stride)?;
            let blocks = (0..config.depths[j])
                .map(|i| {
                    let b = s.pp(format!("block{i}"));
                    Ok(Block {
                        norm1: LayerNorm::new(&b.pp("norm1"), dim, LN_EPS)?,
                        attn: SpatialReductionAttention::new(&b.pp("attn"), dim, config.heads[j], config.sr_ratios[j])?,
                        norm2: LayerNorm::new(&b.pp("norm2"), dim, LN_EPS)?,
                        ffn: MixFfn::new(&b.pp("mlp"), dim, dim * config.mlp_ratios[j])?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                embed,
                blocks,
                norm: LayerNorm::new(&s.pp("norm"), dim, LN_EPS)?,
            });
            c_in = dim;
        }
        Ok(Self { config, stages })
    }

    pub fn config(&self) -> &PvtConfig {
        &self.config
    }

    /// Attention weights of the first block of stage `stage` (0-based) for `image`.
    pub fn first_attention(&self, image: &Tensor, stage: usize) -> Result<Tensor> {
        let mut x = image.clone();
        for (j, st) in self.stages.iter().enumerate() {
            let (mut t, h, w) = st.embed.forward(&x)?;
            if j == stage {
                let blk = st
                    .blocks
                    .first()
                    .ok_or_else(|| Error::Shape(format!("stage {} has no transformer blocks", j + 1)))?;
                return Ok(blk.attn.weights(&blk.norm1.forward(&t)?, h, w)?.0);
            }
            for b in &st.blocks {
                t = b.forward(&t, h, w)?;
            }
            x = tokens_to_map(&st.norm.forward(&t)?, h, w)?;
        }
        Err(Error::Shape(format!("stage index {stage} out of range")))
    }
}

impl Encoder for PvtEncoder {
    fn name(&self) -> &str {
        self.config.name
    }

    fn stage_widths(&self) -> [usize; 4] {
        self.config.widths
    }

    fn encode(&self, image: &Tensor, _train: bool) -> Result<EncoderOutput> {
        check_divisible(image)?;
        let mut x = image.clone();
        let mut outs = Vec::with_capacity(4);
        for st in &self.stages {
            let (mut t, h, w) = st.embed.forward(&x)?;
            for b in &st.blocks {
                t = b.forward(&t, h, w)?;
            }
            x = tokens_to_map(&st.norm.forward(&t)?, h, w)?;
            outs.push(x.clone());
        }
        let stages: [Tensor; 4] = outs.try_into().expect("four stages");
        Ok(EncoderOutput {
            features: MultiScaleFeatures { stages },
            skips: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_sampled, seeded_normal};
    use crate::params::ParamStore;
    use candle_core::{DType, Device, Var};

    #[test]
    fn tiny_stage_shapes() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let enc = PvtEncoder::new(&store.root(), PvtConfig::tiny()).unwrap();
        let x = seeded_normal((2, 3, 64, 96), 1, DType::F32, &Device::Cpu).unwrap();
        let out = enc.encode(&x, false).unwrap();
        let dims: Vec<Vec<usize>> = out.features.stages.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(
            dims,
            vec![
                vec![2, 16, 16, 24],
                vec![2, 32, 8, 12],
                vec![2, 64, 4, 6],
                vec![2, 128, 2, 3]
            ]
        );
    }

    #[test]
    fn b3_parameter_shapes_follow_published_layout() {
        // widths, heads and reduction ratios show up in the parameter shapes
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        PvtEncoder::new(&store.root(), PvtConfig::b3()).unwrap();
        let dims = |n: &str| store.get(n).unwrap().dims().to_vec();
        assert_eq!(dims("stage1.patch_embed.proj.weight"), vec![64, 3, 7, 7]);
        assert_eq!(dims("stage2.patch_embed.proj.weight"), vec![128, 64, 3, 3]);
        assert_eq!(dims("stage1.block0.attn.sr.weight"), vec![64, 64, 8, 8]);
        assert_eq!(dims("stage3.block17.attn.sr.weight"), vec![320, 320, 2, 2]);
        assert!(store.get("stage4.block0.attn.sr.weight").is_none());
        assert_eq!(dims("stage1.block0.mlp.fc1.weight"), vec![512, 64]);
        assert_eq!(dims("stage4.block2.mlp.fc1.weight"), vec![2048, 512]);
        assert!(store.get("stage2.block4.norm1.weight").is_none());
        assert!(store.get("stage2.block3.norm1.weight").is_some());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let store = ParamStore::new(3, DType::F64, &Device::Cpu);
        let enc = PvtEncoder::new(&store.root(), PvtConfig::tiny()).unwrap();
        let x = seeded_normal((1, 3, 64, 64), 2, DType::F64, &Device::Cpu).unwrap();
        for stage in 0..4 {
            let a = enc.first_attention(&x, stage).unwrap();
            let sums = a
                .sum(D::Minus1)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
            assert!(a
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()
                .iter()
                .all(|p| *p >= 0.0));
        }
        let a = enc.first_attention(&x, 0).unwrap();
        // 16x16 queries against a 2x2 reduced key grid
        assert_eq!(a.dims(), &[1, 1, 256, 4]);
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let store = ParamStore::new(4, DType::F64, &Device::Cpu);
        let attn = SpatialReductionAttention::new(&store.root(), 4, 2, 2).unwrap();
        let x = Var::from_tensor(&seeded_normal((1, 16, 4), 5, DType::F64, &Device::Cpu).unwrap()).unwrap();
        let mut vars = vec![("x".to_string(), x.clone())];
        vars.extend(store.trainable());
        let r = grad_check_sampled(|| Ok(attn.forward(x.as_tensor(), 4, 4)?.sqr()?), &vars, 1e-5, 8, 1).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn ffn_gradient_matches_finite_differences() {
        let store = ParamStore::new(5, DType::F64, &Device::Cpu);
        let ffn = MixFfn::new(&store.root(), 3, 6).unwrap();
        let x = Var::from_tensor(&seeded_normal((1, 9, 3), 6, DType::F64, &Device::Cpu).unwrap()).unwrap();
        let mut vars = vec![("x".to_string(), x.clone())];
        vars.extend(store.trainable());
        let r = grad_check_sampled(|| Ok(ffn.forward(x.as_tensor(), 3, 3)?.sqr()?), &vars, 1e-5, 8, 2).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn heads_must_divide_width() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let mut cfg = PvtConfig::tiny();
        cfg.heads[2] = 3;
        assert!(matches!(PvtEncoder::new(&store.root(), cfg), Err(Error::Config(_))));
    }

    #[test]
    fn encoding_is_deterministic() {
        let store = ParamStore::new(6, DType::F32, &Device::Cpu);
        let enc = PvtEncoder::new(&store.root(), PvtConfig::tiny()).unwrap();
        let x = seeded_normal((1, 3, 64, 64), 7, DType::F32, &Device::Cpu).unwrap();
        let a = enc.encode(&x, false).unwrap().features.stages[3]
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let b = enc.encode(&x, false).unwrap().features.stages[3]
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(a, b);
    }
}
