//! Layer primitives shared by blocks and backbones.
//!
//! Feature maps are `(batch, channels, height, width)` tensors throughout.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, Var, D};

use crate::error::{Error, Result};
use crate::params::{Init, Scope};

/// Group count used by every group normalization: the largest divisor of `channels`
/// not exceeding `min(32, channels / 2)`, so each group spans at least two channels
/// whenever the map has more than one.
pub fn group_count(channels: usize) -> usize {
    let cap = (channels / 2).clamp(1, 32);
    (1..=cap).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    padding: usize,
    stride: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn k3() -> Self {
        Self {
            kernel: 3,
            stride: 1,
            padding: 1,
            groups: 1,
            bias: true,
        }
    }

    pub fn k1() -> Self {
        Self {
            kernel: 1,
            stride: 1,
            padding: 0,
            groups: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    pub fn new(scope: &Scope, c_in: usize, c_out: usize, spec: ConvSpec) -> Result<Self> {
        if !c_in.is_multiple_of(spec.groups) || !c_out.is_multiple_of(spec.groups) {
            return Err(Error::Shape(format!(
                "conv channels {c_in}->{c_out} not divisible by {} groups",
                spec.groups
            )));
        }
        let fan_out = spec.kernel * spec.kernel * c_out / spec.groups;
        let weight = scope.param(
            "weight",
            (c_out, c_in / spec.groups, spec.kernel, spec.kernel),
            Init::KaimingFanOut { fan_out },
        )?;
        let bias = if spec.bias {
            Some(scope.param("bias", c_out, Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            padding: spec.padding,
            stride: spec.stride,
            groups: spec.groups,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let y = if self.groups == 1 {
            conv2d_im2col(x, &self.weight, self.padding, self.stride)?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, self.groups)?
        };
        match &self.bias {
            Some(b) => channel_shift(&y, b, 1),
            None => Ok(y),
        }
    }
}

/// Patch geometry shared by [`Im2Col`] and its adjoint [`Col2Im`].
#[derive(Debug, Clone, Copy)]
struct Patches {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl Patches {
    /// Output columns `[lo, hi)` whose tap at kernel offset `k` lands inside `0..n`.
    #[inline]
    fn valid(&self, k: usize, n: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        // ix = o * s + k - padding must satisfy 0 <= ix < n
        let lo = self.padding.saturating_sub(k).div_ceil(s);
        let hi = if n + self.padding > k {
            (n + self.padding - k).div_ceil(s)
        } else {
            0
        };
        (lo.min(out), hi.min(out).max(lo.min(out)))
    }

    /// Calls `f(src_row, dst_row, x0, lo, hi)` for every run of in-bounds taps of one
    /// sample: image row `src_row` starting at column `x0` feeds column indices
    /// `dst_row + lo .. dst_row + hi`, one image column per `stride`. Consecutive
    /// patch rows are `pitch` apart in the destination.
    #[inline]
    fn for_each_run(&self, pitch: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        for c in 0..self.channels {
            for ky in 0..self.kh {
                let (y_lo, y_hi) = self.valid(ky, self.h, self.oh);
                for kx in 0..self.kw {
                    let (x_lo, x_hi) = self.valid(kx, self.w, self.ow);
                    let row = ((c * self.kh + ky) * self.kw + kx) * pitch;
                    for oy in y_lo..y_hi {
                        let iy = oy * self.stride + ky - self.padding;
                        let x0 = x_lo * self.stride + kx - self.padding;
                        f((c * self.h + iy) * self.w, row + oy * self.ow, x0, x_lo, x_hi);
                    }
                }
            }
        }
    }

    fn image_len(&self) -> usize {
        self.channels * self.h * self.w
    }

    fn cols_len(&self) -> usize {
        self.channels * self.kh * self.kw * self.oh * self.ow
    }
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout, name: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("{name} needs a contiguous input"),
    }
}

/// `(b, c, h, w)` image to `(c * kh * kw, b * oh * ow)` patch columns, zero outside
/// the padded border. Keeping the batch inside the columns turns the convolution
/// into a single matmul whose weight gradient needs no batch reduction.
struct Im2Col(Patches);

/// Adjoint of [`Im2Col`]: columns are summed back into the image they were read from.
struct Col2Im(Patches);

impl Im2Col {
    fn run<T: Copy + Default>(&self, x: &[T]) -> Vec<T> {
        let p = self.0;
        let (n_in, l) = (p.image_len(), p.oh * p.ow);
        let b = x.len() / n_in;
        let mut out = vec![T::default(); b * p.cols_len()];
        for i in 0..b {
            let src = &x[i * n_in..(i + 1) * n_in];
            let stride = p.stride;
            p.for_each_run(b * l, |src_row, dst_row, x0, lo, hi| {
                let row = i * l + dst_row;
                let out = &mut out[row + lo..row + hi];
                if stride == 1 {
                    out.copy_from_slice(&src[src_row + x0..src_row + x0 + out.len()]);
                } else {
                    for (j, o) in out.iter_mut().enumerate() {
                        *o = src[src_row + x0 + j * stride];
                    }
                }
            });
        }
        out
    }
}

impl Col2Im {
    fn run<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let p = self.0;
        let (n_img, l) = (p.image_len(), p.oh * p.ow);
        let b = cols.len() / p.cols_len();
        let mut out = vec![T::default(); b * n_img];
        for i in 0..b {
            let dst = &mut out[i * n_img..(i + 1) * n_img];
            let stride = p.stride;
            p.for_each_run(b * l, |src_row, dst_row, x0, lo, hi| {
                let row = i * l + dst_row;
                for (j, &v) in cols[row + lo..row + hi].iter().enumerate() {
                    dst[src_row + x0 + j * stride] += v;
                }
            });
        }
        out
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let b = layout.dims()[0];
        let p = self.0;
        let shape = Shape::from((p.channels * p.kh * p.kw, b * p.oh * p.ow));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous_slice(v, layout, "im2col")?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous_slice(v, layout, "im2col")?)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let p = self.0;
        let b = layout.dims()[1] / (p.oh * p.ow);
        let shape = Shape::from((b, p.channels, p.h, p.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous_slice(v, layout, "col2im")?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous_slice(v, layout, "col2im")?)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// `(c, b * h * w)` matmul output back to `(b, c, h, w)`.
fn unbatch(y: &Tensor, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = y.dim(0)?;
    Ok(y.reshape((c, b, h, w))?.transpose(0, 1)?.contiguous()?)
}

/// Ungrouped convolution as patch extraction plus one matmul. Both directions of the
/// patch copy are single passes, so the backward pass costs about two matmuls; the
/// built-in kernel differentiates through a much slower transposed convolution on
/// the CPU.
pub fn conv2d_im2col(x: &Tensor, weight: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (c_out, c_w, kh, kw) = weight.dims4()?;
    if c != c_w {
        return Err(Error::Shape(format!("conv weight expects {c_w} channels, got {c}")));
    }
    if stride == 0 {
        return Err(Error::Shape("conv stride must be positive".into()));
    }
    if kh == 1 && kw == 1 && padding == 0 && stride == 1 {
        let cols = x.transpose(0, 1)?.reshape((c, b * h * w))?;
        return unbatch(&weight.reshape((c_out, c))?.matmul(&cols)?, b, h, w);
    }
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    if hp < kh || wp < kw {
        return Err(Error::Shape(format!(
            "{h}x{w} input is smaller than the {kh}x{kw} kernel"
        )));
    }
    let patches = Patches {
        channels: c,
        h,
        w,
        kh,
        kw,
        padding,
        stride,
        oh: (hp - kh) / stride + 1,
        ow: (wp - kw) / stride + 1,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(patches))?;
    let y = weight.reshape((c_out, c * kh * kw))?.matmul(&cols)?;
    unbatch(&y, b, patches.oh, patches.ow)
}

/// Extent of a per-channel operation: the tensor is viewed as `(outer, channels, inner)`.
#[derive(Debug, Clone, Copy)]
struct Channels {
    channels: usize,
    inner: usize,
}

impl Channels {
    fn of(x: &Tensor, dim: usize) -> Result<Self> {
        let dims = x.dims();
        if dim >= dims.len() {
            return Err(Error::Shape(format!("channel axis {dim} out of range for {dims:?}")));
        }
        Ok(Self {
            channels: dims[dim],
            inner: dims[dim + 1..].iter().product(),
        })
    }

    /// `(channel, index range)` for every contiguous run of `inner` positions.
    #[inline]
    fn runs(&self, n: usize) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + '_ {
        let inner = self.inner;
        (0..n / inner.max(1)).map(move |r| (r % self.channels, r * inner..(r + 1) * inner))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ChannelKind {
    Scale,
    Shift,
}

/// `x * p[c]` or `x + p[c]` along one axis. The broadcast equivalents reduce their
/// parameter gradient with a strided sum that dominates CPU training time.
struct ChannelOp(ChannelKind, Channels);

/// Per-channel sum of `grad` (one input) or of `grad * x` (two inputs).
struct ChannelSum(Channels);

impl ChannelOp {
    fn run<T: candle_core::WithDType>(&self, x: &[T], p: &[T]) -> Vec<T> {
        let mut out = x.to_vec();
        for (c, run) in self.1.runs(x.len()) {
            let v = p[c];
            match self.0 {
                ChannelKind::Scale => out[run].iter_mut().for_each(|o| *o *= v),
                ChannelKind::Shift => out[run].iter_mut().for_each(|o| *o += v),
            }
        }
        out
    }
}

impl ChannelSum {
    fn run<T: candle_core::WithDType>(&self, g: &[T], x: Option<&[T]>) -> Vec<T> {
        let mut acc = vec![0f64; self.0.channels];
        for (c, run) in self.0.runs(g.len()) {
            let s: T = match x {
                Some(x) => g[run.clone()]
                    .iter()
                    .zip(&x[run])
                    .fold(T::zero(), |a, (&g, &x)| a + g * x),
                None => g[run].iter().fold(T::zero(), |a, &g| a + g),
            };
            acc[c] += s.to_f64();
        }
        acc.into_iter().map(T::from_f64).collect()
    }
}

impl candle_core::CustomOp2 for ChannelOp {
    fn name(&self) -> &'static str {
        "channel-op"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(p)) => CpuStorage::F32(self.run(
                contiguous_slice(x, l1, "channel op")?,
                contiguous_slice(p, l2, "channel op")?,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(p)) => CpuStorage::F64(self.run(
                contiguous_slice(x, l1, "channel op")?,
                contiguous_slice(p, l2, "channel op")?,
            )),
            _ => candle_core::bail!("channel op supports matching f32 or f64 inputs only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        p: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        Ok(match self.0 {
            ChannelKind::Shift => {
                let dp = grad.apply_op1_no_bwd(&ChannelSum(self.1))?;
                (Some(grad), Some(dp))
            }
            ChannelKind::Scale => {
                let dp = grad.apply_op2_no_bwd(x, &ChannelSum(self.1))?;
                (
                    Some(grad.apply_op2(p, ChannelOp(ChannelKind::Scale, self.1))?),
                    Some(dp),
                )
            }
        })
    }
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(g) => CpuStorage::F32(self.run(contiguous_slice(g, l, "channel sum")?, None)),
            CpuStorage::F64(g) => CpuStorage::F64(self.run(contiguous_slice(g, l, "channel sum")?, None)),
            _ => candle_core::bail!("channel sum supports f32 and f64 only"),
        };
        Ok((out, Shape::from(self.0.channels)))
    }
}

impl candle_core::CustomOp2 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-dot"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(g), CpuStorage::F32(x)) => CpuStorage::F32(self.run(
                contiguous_slice(g, l1, "channel sum")?,
                Some(contiguous_slice(x, l2, "channel sum")?),
            )),
            (CpuStorage::F64(g), CpuStorage::F64(x)) => CpuStorage::F64(self.run(
                contiguous_slice(g, l1, "channel sum")?,
                Some(contiguous_slice(x, l2, "channel sum")?),
            )),
            _ => candle_core::bail!("channel sum supports matching f32 or f64 inputs only"),
        };
        Ok((out, Shape::from(self.0.channels)))
    }
}

fn channel_op(kind: ChannelKind, x: &Tensor, p: &Tensor, dim: usize) -> Result<Tensor> {
    let geo = Channels::of(x, dim)?;
    if p.elem_count() != geo.channels {
        return Err(Error::Shape(format!(
            "per-channel parameter has {} values for {} channels",
            p.elem_count(),
            geo.channels
        )));
    }
    let p = p.flatten_all()?.contiguous()?;
    Ok(x.contiguous()?.apply_op2(&p, ChannelOp(kind, geo))?)
}

/// `x` times `p[c]`, where `c` indexes axis `dim`.
pub fn channel_scale(x: &Tensor, p: &Tensor, dim: usize) -> Result<Tensor> {
    channel_op(ChannelKind::Scale, x, p, dim)
}

/// `x` plus `p[c]`, where `c` indexes axis `dim`.
pub fn channel_shift(x: &Tensor, p: &Tensor, dim: usize) -> Result<Tensor> {
    channel_op(ChannelKind::Shift, x, p, dim)
}

/// 3x3 depthwise convolution built from shifted slices.
#[derive(Debug, Clone)]
pub struct DepthwiseConv3 {
    weight: Tensor,
    bias: Tensor,
}

impl DepthwiseConv3 {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        let weight = scope.param("weight", (channels, 1, 3, 3), Init::KaimingFanOut { fan_out: 9 })?;
        let bias = scope.param("bias", channels, Init::Const(0.0))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut acc: Option<Tensor> = None;
        for di in 0..3 {
            for dj in 0..3 {
                let tap = self.weight.narrow(2, di, 1)?.narrow(3, dj, 1)?;
                let shifted = padded.narrow(2, di, h)?.narrow(3, dj, w)?;
                let term = channel_scale(&shifted, &tap, 1)?;
                acc = Some(match acc {
                    Some(a) => (a + term)?,
                    None => term,
                });
            }
        }
        let out = acc.expect("nine taps");
        channel_shift(&out, &self.bias, 1)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(scope: &Scope, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = scope.param("weight", (d_out, d_in), Init::TruncNormal { std: 0.02 })?;
        let bias = if bias {
            Some(scope.param("bias", d_out, Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Maps the last axis; leading axes are flattened into one matmul.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (d_out, d_in) = self.weight.dims2()?;
        let mut dims = x.dims().to_vec();
        match dims.last_mut() {
            Some(d) if *d == d_in => *d = d_out,
            _ => return Err(Error::Shape(format!("linear expects last axis {d_in}, got {dims:?}"))),
        }
        let rows = x.elem_count() / d_in;
        let mut y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = channel_shift(&y, b, 1)?;
        }
        Ok(y.reshape(dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    channels: usize,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", channels, Init::Const(1.0))?,
            bias: scope.param("bias", channels, Init::Const(0.0))?,
            channels,
            groups: group_count(channels),
            eps: 1e-5,
        })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "group norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(2)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        channel_shift(&channel_scale(&normed, &self.weight, 1)?, &self.bias, 1)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &Scope, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", dim, Init::Const(1.0))?,
            bias: scope.param("bias", dim, Init::Const(0.0))?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let last = normed.rank() - 1;
        channel_shift(&channel_scale(&normed, &self.weight, last)?, &self.bias, last)
    }
}

/// Batch normalization with running statistics kept as store buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", channels, Init::Const(1.0))?,
            bias: scope.param("bias", channels, Init::Const(0.0))?,
            running_mean: scope.buffer("running_mean", channels, Init::Const(0.0))?,
            running_var: scope.buffer("running_var", channels, Init::Const(1.0))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 {
                (var.detach() * (n / (n - 1.0)))?
            } else {
                var.detach()
            };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().reshape(c)? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.reshape(c)? * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        channel_shift(&channel_scale(&normed, &self.weight, 1)?, &self.bias, 1)
    }
}

/// Bilinear interpolation weights mapping `n_in` samples to `n_out`, corner-aligned:
/// output index `i` reads input position `i * (n_in - 1) / (n_out - 1)`.
pub fn interp_weights(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    for i in 0..n_out {
        let src = if n_out > 1 {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        } else {
            0.0
        };
        let lo = (src.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        let frac = src - lo as f64;
        m[i * n_in + lo] += 1.0 - frac;
        if frac > 0.0 {
            m[i * n_in + hi] += frac;
        }
    }
    m
}

/// Bilinear resize of a `(b, c, h, w)` map to `size`. Differentiable; a no-op when the
/// map already has the requested size.
pub fn resize(x: &Tensor, size: (usize, usize)) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (th, tw) = size;
    if th == 0 || tw == 0 {
        return Err(Error::Shape(format!("resize target {th}x{tw} must be positive")));
    }
    if (h, w) == (th, tw) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dt = x.dtype();
    let mut y = x.clone();
    if w != tw {
        let mw = Tensor::from_vec(interp_weights(w, tw), (tw, w), dev)?.to_dtype(dt)?;
        y = y.reshape((b * c * h, w))?.matmul(&mw.t()?)?.reshape((b, c, h, tw))?;
    }
    if h != th {
        let mh = Tensor::from_vec(interp_weights(h, th), (th, h), dev)?.to_dtype(dt)?;
        y = y
            .transpose(2, 3)?
            .contiguous()?
            .reshape((b * c * tw, h))?
            .matmul(&mh.t()?)?
            .reshape((b, c, tw, th))?
            .transpose(2, 3)?
            .contiguous()?;
    }
    Ok(y)
}

/// Channel concatenation, first argument first.
pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    let hw = parts.first().map(|t| t.dims4()).transpose()?.map(|(_, _, h, w)| (h, w));
    for p in parts {
        let (_, _, h, w) = p.dims4()?;
        if Some((h, w)) != hw {
            return Err(Error::Shape(format!(
                "cannot concatenate maps of spatial size {:?} and {:?}",
                hw,
                (h, w)
            )));
        }
    }
    Ok(Tensor::cat(parts, 1)?)
}

/// `(b, c, h, w)` -> `(b, h*w, c)`, row-major over space.
pub fn map_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`map_to_tokens`].
pub fn tokens_to_map(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != h * w {
        return Err(Error::Shape(format!("{n} tokens cannot form a {h}x{w} map")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// 3x3, stride 2, padding 1 max pooling. Only valid for non-negative inputs
/// (it pads with zeros), which holds after a ReLU.
pub fn max_pool_3x3_s2_nonneg(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let padded = x
        .pad_with_zeros(2, 1, 2 * oh + 1 - h)?
        .pad_with_zeros(3, 1, 2 * ow + 1 - w)?;
    let mut out: Option<Tensor> = None;
    for di in 0..3 {
        for dj in 0..3 {
            let win = padded
                .narrow(2, di, 2 * oh)?
                .narrow(3, dj, 2 * ow)?
                .reshape((b, c, oh, 2, ow, 2))?
                .narrow(3, 0, 1)?
                .narrow(5, 0, 1)?
                .reshape((b, c, oh, ow))?;
            out = Some(match out {
                Some(o) => o.maximum(&win)?,
                None => win,
            });
        }
    }
    Ok(out.expect("nine windows"))
}
