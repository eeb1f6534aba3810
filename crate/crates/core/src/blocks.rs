//! Differentiable building blocks: the residual units, the progressive locality
//! decoder pieces, the fuse decoder and the prediction head.
//!
//! Every block is a pure function of its input maps and its parameters, with the one
//! exception of batch normalization in training mode, which also updates running
//! statistics.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{concat, resize, BatchNorm, Conv2d, ConvSpec, GroupNorm};
use crate::params::Scope;

/// `Conv(SiLU(GN(x)))` with a 3x3, stride 1, padding 1 convolution.
#[derive(Debug, Clone)]
pub struct Gsc {
    norm: GroupNorm,
    conv: Conv2d,
}

impl Gsc {
    pub fn new(scope: &Scope, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&scope.pp("norm"), c_in)?,
            conv: Conv2d::new(&scope.pp("conv"), c_in, c_out, ConvSpec::k3())?,
        })
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm.forward(x)?;
        let h = candle_nn::ops::silu(&h)?;
        self.conv.forward(&h)
    }
}

/// `x + GSC(GSC(x))`; a 1x1 projection replaces the identity skip when the channel
/// count changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    first: Gsc,
    second: Gsc,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(scope: &Scope, c_in: usize, c_out: usize) -> Result<Self> {
        let skip = if c_in != c_out {
            Some(Conv2d::new(&scope.pp("skip"), c_in, c_out, ConvSpec::k1())?)
        } else {
            None
        };
        Ok(Self {
            first: Gsc::new(&scope.pp("gsc1"), c_in, c_out)?,
            second: Gsc::new(&scope.pp("gsc2"), c_out, c_out)?,
            skip,
        })
    }

    /// The 1x1 skip projection, present when the channel count changes.
    pub fn projection(&self) -> Option<&Conv2d> {
        self.skip.as_ref()
    }

    pub fn residual_convs(&self) -> [&Conv2d; 2] {
        [self.first.conv(), self.second.conv()]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let r = self.second.forward(&self.first.forward(x)?)?;
        let skip = match &self.skip {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + r)?)
    }
}

/// Two residual blocks in sequence with independent parameters.
#[derive(Debug, Clone)]
pub struct ResBlock2 {
    pub(crate) first: ResBlock,
    pub(crate) second: ResBlock,
}

impl ResBlock2 {
    pub fn new(scope: &Scope, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            first: ResBlock::new(&scope.pp("rb1"), c_in, c_out)?,
            second: ResBlock::new(&scope.pp("rb2"), c_out, c_out)?,
        })
    }

    pub fn blocks(&self) -> [&ResBlock; 2] {
        [&self.first, &self.second]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.second.forward(&self.first.forward(x)?)
    }
}

/// Spatial size of a map at `stride` relative to an input of size `image`.
pub fn stride_size(image: (usize, usize), stride: usize) -> (usize, usize) {
    (image.0.div_ceil(stride), image.1.div_ceil(stride))
}

/// Bilinear upsampling to an explicit size.
pub fn upsample(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    resize(x, target)
}

/// Local emphasis: `Up(RB²(x))` to the stride-4 grid.
#[derive(Debug, Clone)]
pub struct LocalEmphasis {
    body: ResBlock2,
}

impl LocalEmphasis {
    pub fn new(scope: &Scope, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            body: ResBlock2::new(scope, c_in, c_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
        upsample(&self.body.forward(x)?, target)
    }
}

/// `D(x, y) = RB²(concat(x, y))`.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    body: ResBlock2,
}

impl DecoderBlock {
    pub fn new(scope: &Scope, c_x: usize, c_y: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            body: ResBlock2::new(scope, c_x + c_y, c_out)?,
        })
    }

    pub fn body(&self) -> &ResBlock2 {
        &self.body
    }

    pub fn forward(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        self.body.forward(&concat(&[x, y])?)
    }
}

/// Stepwise feature aggregation, deepest stage first:
/// `D(D(D(e4, e3), e2), e1)`.
#[derive(Debug, Clone)]
pub struct StepwiseAggregation {
    steps: [DecoderBlock; 3],
}

impl StepwiseAggregation {
    pub fn new(scope: &Scope, width: usize) -> Result<Self> {
        Ok(Self {
            steps: [
                DecoderBlock::new(&scope.pp("d43"), width, width, width)?,
                DecoderBlock::new(&scope.pp("d32"), width, width, width)?,
                DecoderBlock::new(&scope.pp("d21"), width, width, width)?,
            ],
        })
    }

    pub fn steps(&self) -> &[DecoderBlock; 3] {
        &self.steps
    }

    pub fn forward(&self, e: [&Tensor; 4]) -> Result<Tensor> {
        let [e1, e2, e3, e4] = e;
        let x = self.steps[0].forward(e4, e3)?;
        let x = self.steps[1].forward(&x, e2)?;
        self.steps[2].forward(&x, e1)
    }
}

/// `Up(ReLU(BN(Conv1x1(x))))`.
#[derive(Debug, Clone)]
pub struct MlpBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

impl MlpBlock {
    pub fn new(scope: &Scope, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            // bias is redundant in front of batch norm
            conv: Conv2d::new(&scope.pp("conv"), c_in, c_out, ConvSpec::k1().no_bias())?,
            bn: BatchNorm::new(&scope.pp("bn"), c_out)?,
        })
    }

    /// The activation before upsampling.
    pub fn project(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward_t(&self.conv.forward(x)?, train)?.relu()?)
    }

    pub fn forward(&self, x: &Tensor, target: (usize, usize), train: bool) -> Result<Tensor> {
        upsample(&self.project(x, train)?, target)
    }
}

/// One stage of the fuse decoder: `MLP(concat(RB²(a), RB²(b)))` where `a` comes from the
/// convolution encoder and `b` from the transformer encoder.
#[derive(Debug, Clone)]
pub struct FuseStage {
    conv_branch: ResBlock2,
    transformer_branch: ResBlock2,
    mlp: MlpBlock,
}

impl FuseStage {
    pub fn new(scope: &Scope, c_a: usize, c_b: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv_branch: ResBlock2::new(&scope.pp("rb_a"), c_a, c_a)?,
            transformer_branch: ResBlock2::new(&scope.pp("rb_b"), c_b, c_b)?,
            mlp: MlpBlock::new(&scope.pp("mlp"), c_a + c_b, c_out)?,
        })
    }

    pub fn forward(&self, a: &Tensor, b: &Tensor, target: (usize, usize), train: bool) -> Result<Tensor> {
        let (_, _, ha, wa) = a.dims4()?;
        let (_, _, hb, wb) = b.dims4()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::Shape(format!(
                "fuse stage inputs differ in size: {ha}x{wa} vs {hb}x{wb}"
            )));
        }
        let a = self.conv_branch.forward(a)?;
        let b = self.transformer_branch.forward(b)?;
        self.mlp.forward(&concat(&[&a, &b])?, target, train)
    }
}

/// The fuse decoder: one [`FuseStage`] per encoder stage, concatenated and merged by a
/// final [`MlpBlock`].
#[derive(Debug, Clone)]
pub struct FuseDecoder {
    stages: Vec<FuseStage>,
    merge: MlpBlock,
}

impl FuseDecoder {
    pub fn new(
        scope: &Scope,
        widths_a: [usize; 4],
        widths_b: [usize; 4],
        stage_width: usize,
        out_width: usize,
    ) -> Result<Self> {
        let stages = (0..4)
            .map(|j| {
                FuseStage::new(
                    &scope.pp(format!("stage{}", j + 1)),
                    widths_a[j],
                    widths_b[j],
                    stage_width,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stages,
            merge: MlpBlock::new(&scope.pp("merge"), 4 * stage_width, out_width)?,
        })
    }

    pub fn stages(&self) -> &[FuseStage] {
        &self.stages
    }

    pub fn merge(&self) -> &MlpBlock {
        &self.merge
    }

    /// Per-stage fused maps, all at `target`.
    pub fn stage_maps(&self, pairs: &[(&Tensor, &Tensor)], target: (usize, usize), train: bool) -> Result<Vec<Tensor>> {
        if pairs.len() != self.stages.len() {
            return Err(Error::Shape(format!(
                "fuse decoder expects {} stage pairs, got {}",
                self.stages.len(),
                pairs.len()
            )));
        }
        self.stages
            .iter()
            .zip(pairs)
            .map(|(s, (a, b))| s.forward(a, b, target, train))
            .collect()
    }

    pub fn merge_maps(&self, maps: &[Tensor], target: (usize, usize), train: bool) -> Result<Tensor> {
        let refs: Vec<&Tensor> = maps.iter().collect();
        self.merge.forward(&concat(&refs)?, target, train)
    }

    pub fn forward(&self, pairs: &[(&Tensor, &Tensor)], target: (usize, usize), train: bool) -> Result<Tensor> {
        let maps = self.stage_maps(pairs, target, train)?;
        self.merge_maps(&maps, target, train)
    }
}

/// Probabilities are kept in `[PROB_FLOOR, 1 - PROB_FLOOR]`, so a saturated sigmoid
/// still lies strictly inside (0, 1) in single precision.
pub const PROB_FLOOR: f64 = 1e-7;

pub fn probability(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(logits)?.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)?)
}

/// `σ(Conv1x1(RB²(Up(x))))`, producing a single-channel probability map.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    body: ResBlock2,
    classifier: Conv2d,
}

impl PredictionHead {
    pub fn new(scope: &Scope, c_in: usize, width: usize) -> Result<Self> {
        Ok(Self {
            body: ResBlock2::new(&scope.pp("body"), c_in, width)?,
            classifier: Conv2d::new(&scope.pp("classifier"), width, 1, ConvSpec::k1())?,
        })
    }

    pub fn classifier(&self) -> &Conv2d {
        &self.classifier
    }

    /// Penultimate features at full resolution.
    pub fn features(&self, x: &Tensor, size: (usize, usize)) -> Result<Tensor> {
        self.body.forward(&upsample(x, size)?)
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        self.classifier.forward(features)
    }

    pub fn forward(&self, x: &Tensor, size: (usize, usize)) -> Result<Tensor> {
        probability(&self.logits(&self.features(x, size)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn store(seed: u64) -> std::sync::Arc<ParamStore> {
        ParamStore::new(seed, DType::F64, &Device::Cpu)
    }

    fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        crate::gradcheck::seeded_normal(shape, seed, DType::F64, &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn gsc_constant_input_yields_bias() {
        let s = store(1);
        let g = Gsc::new(&s.root().pp("g"), 4, 3).unwrap();
        let bias = Tensor::new(&[0.5f64, -1.0, 2.0], &Device::Cpu).unwrap();
        s.get("g.conv.bias").unwrap().set(&bias).unwrap();
        // a constant map normalizes to zero and SiLU(0) = 0, leaving only the bias
        let x = Tensor::full(3.0f64, (1, 4, 5, 5), &Device::Cpu).unwrap();
        let y = g.forward(&x).unwrap().squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        for (c, plane) in y.iter().enumerate() {
            let want = [0.5, -1.0, 2.0][c];
            for row in plane {
                for v in row {
                    assert!((v - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gsc_unit_kernel_matches_loop() {
        let s = store(2);
        let g = Gsc::new(&s.root().pp("g"), 1, 1).unwrap();
        s.get("g.conv.weight")
            .unwrap()
            .set(&Tensor::ones((1, 1, 3, 3), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        let vals: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 - 1.5).collect();
        let x = Tensor::from_vec(vals.clone(), (1, 1, 4, 4), &Device::Cpu).unwrap();
        let y = g.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // oracle: GN over one group, SiLU, then 3x3 box sum with zero padding
        let mean = vals.iter().sum::<f64>() / 16.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        let act: Vec<f64> = vals
            .iter()
            .map(|v| {
                let n = (v - mean) / (var + 1e-5).sqrt();
                n / (1.0 + (-n).exp())
            })
            .collect();
        for i in 0..4i32 {
            for j in 0..4i32 {
                let mut acc = 0.0;
                for di in -1..=1 {
                    for dj in -1..=1 {
                        let (a, b) = (i + di, j + dj);
                        if (0..4).contains(&a) && (0..4).contains(&b) {
                            acc += act[(a * 4 + b) as usize];
                        }
                    }
                }
                assert!((y[(i * 4 + j) as usize] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_residual_is_identity() {
        let s = store(3);
        let rb2 = ResBlock2::new(&s.root().pp("r"), 6, 6).unwrap();
        for (name, e) in s.entries() {
            if name.contains(".conv.") {
                e.var.set(&e.var.zeros_like().unwrap()).unwrap();
            }
        }
        let x = randn((2, 6, 5, 7), 9);
        assert_eq!(max_abs_diff(&rb2.forward(&x).unwrap(), &x), 0.0);
        assert_eq!(max_abs_diff(&rb2.first.forward(&x).unwrap(), &x), 0.0);
    }

    #[test]
    fn rb2_is_two_rb_calls() {
        let s = store(4);
        let rb2 = ResBlock2::new(&s.root().pp("r"), 4, 4).unwrap();
        let x = randn((1, 4, 6, 6), 1);
        let manual = rb2.second.forward(&rb2.first.forward(&x).unwrap()).unwrap();
        assert_eq!(max_abs_diff(&rb2.forward(&x).unwrap(), &manual), 0.0);
    }

    #[test]
    fn d_block_order_matters() {
        let s = store(5);
        let d = DecoderBlock::new(&s.root().pp("d"), 4, 4, 4).unwrap();
        let x = randn((1, 4, 6, 6), 2);
        let y = randn((1, 4, 6, 6), 3);
        let xy = d.forward(&x, &y).unwrap();
        let yx = d.forward(&y, &x).unwrap();
        assert!(max_abs_diff(&xy, &yx) > 1e-6);
        let manual = d.body.forward(&Tensor::cat(&[&x, &y], 1).unwrap()).unwrap();
        assert_eq!(max_abs_diff(&xy, &manual), 0.0);
        let z = randn((1, 4, 3, 6), 4);
        assert!(matches!(d.forward(&x, &z), Err(Error::Shape(_))));
    }

    #[test]
    fn sfa_is_three_d_blocks_deepest_first() {
        let s = store(6);
        let sfa = StepwiseAggregation::new(&s.root().pp("sfa"), 4).unwrap();
        let e: Vec<Tensor> = (0..4).map(|i| randn((1, 4, 5, 5), 10 + i)).collect();
        let out = sfa.forward([&e[0], &e[1], &e[2], &e[3]]).unwrap();
        let a = sfa.steps[0].forward(&e[3], &e[2]).unwrap();
        let b = sfa.steps[1].forward(&a, &e[1]).unwrap();
        let c = sfa.steps[2].forward(&b, &e[0]).unwrap();
        assert_eq!(max_abs_diff(&out, &c), 0.0);
    }

    #[test]
    fn mlp_block_is_nonnegative_and_resizes() {
        let s = store(7);
        let m = MlpBlock::new(&s.root().pp("m"), 8, 4).unwrap();
        let x = randn((2, 8, 3, 3), 5);
        let p = m.project(&x, true).unwrap();
        assert!(p
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
            .iter()
            .all(|v| *v >= 0.0));
        let up = m.forward(&x, (12, 12), true).unwrap();
        assert_eq!(up.dims(), &[2, 4, 12, 12]);
        assert!(up
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
            .iter()
            .all(|v| *v >= 0.0));
    }

    #[test]
    fn fuse_decoder_is_merge_of_stage_maps() {
        let s = store(8);
        let fd = FuseDecoder::new(&s.root().pp("fd"), [4, 4, 6, 6], [2, 4, 4, 8], 4, 4).unwrap();
        let sizes = [8, 4, 2, 1];
        let a: Vec<Tensor> = (0..4)
            .map(|j| randn((2, [4, 4, 6, 6][j], sizes[j], sizes[j]), j as u64))
            .collect();
        let b: Vec<Tensor> = (0..4)
            .map(|j| randn((2, [2, 4, 4, 8][j], sizes[j], sizes[j]), 20 + j as u64))
            .collect();
        let pairs: Vec<(&Tensor, &Tensor)> = a.iter().zip(&b).collect();
        // eval mode so running stats do not drift between the two evaluations
        let full = fd.forward(&pairs, (8, 8), false).unwrap();
        let maps: Vec<Tensor> = (0..4)
            .map(|j| fd.stages[j].forward(pairs[j].0, pairs[j].1, (8, 8), false).unwrap())
            .collect();
        let manual = fd
            .merge
            .forward(&Tensor::cat(&maps, 1).unwrap(), (8, 8), false)
            .unwrap();
        assert_eq!(full.dims(), &[2, 4, 8, 8]);
        assert_eq!(max_abs_diff(&full, &manual), 0.0);
        assert!(matches!(fd.forward(&pairs[..3], (8, 8), false), Err(Error::Shape(_))));
    }

    #[test]
    fn head_range_and_bias_monotonicity() {
        let s = store(9);
        let ph = PredictionHead::new(&s.root().pp("ph"), 6, 4).unwrap();
        let x = randn((1, 6, 4, 4), 30);
        let p = ph.forward(&x, (16, 16)).unwrap();
        assert_eq!(p.dims(), &[1, 1, 16, 16]);
        let v = p.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|p| *p > 0.0 && *p < 1.0));
        assert_eq!(ph.classifier.weight().dims()[2..], [1, 1]);
        let bias = s.get("ph.classifier.bias").unwrap();
        bias.set(&(bias.as_tensor() + 0.5).unwrap()).unwrap();
        let v2 = ph
            .forward(&x, (16, 16))
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        // strictly larger wherever the clamp leaves room
        let clamped = |p: f64| p == PROB_FLOOR || p == 1.0 - PROB_FLOOR;
        assert!(v.iter().zip(&v2).all(|(a, b)| b > a || (a == b && clamped(*a))));
        assert!(v.iter().zip(&v2).any(|(a, b)| b > a));
    }

    #[test]
    fn saturated_logits_stay_inside_the_unit_interval() {
        let z = Tensor::new(&[-1e4f32, -50.0, 0.0, 50.0, 1e4], &Device::Cpu).unwrap();
        let p = probability(&z).unwrap().to_vec1::<f32>().unwrap();
        assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0), "{p:?}");
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn rb_gradient_matches_finite_differences() {
        let s = store(10);
        let rb = ResBlock::new(&s.root().pp("rb"), 1, 1).unwrap();
        let x = candle_core::Var::from_tensor(&randn((1, 1, 4, 4), 11)).unwrap();
        let report = grad_check(|| rb.forward(x.as_tensor()), &[("x".to_string(), x.clone())], 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
