//! Central finite-difference gradient checks against candle's autograd.

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

/// Comparison of analytic and numeric gradients, one entry per checked variable.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// `(name, relative error, ||g_n||)` over checked entries. The error is
    /// `||g_a - g_n||` divided by the larger of `||g_n||`, `||g_a||` and `1e-6` times the
    /// largest numeric norm of the check, so a gradient that is zero by construction
    /// (a bias cancelled by a following normalization) is not judged on noise alone.
    pub per_var: Vec<(String, f64, f64)>,
    pub max_rel_error: f64,
}

/// Deterministic standard-normal tensor.
pub fn seeded_normal(shape: impl Into<Shape>, seed: u64, dtype: DType, device: &Device) -> Result<Tensor> {
    let shape = shape.into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..shape.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

fn scalar(f: &impl Fn() -> Result<Tensor>) -> Result<f64> {
    Ok(f()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Checks every entry of every variable. `f` must be deterministic and should run in
/// f64; its output is reduced by summation.
pub fn grad_check(f: impl Fn() -> Result<Tensor>, vars: &[(String, Var)], eps: f64) -> Result<GradReport> {
    grad_check_sampled(f, vars, eps, usize::MAX, 0)
}

/// Like [`grad_check`] but perturbs at most `max_entries` randomly chosen entries per
/// variable; the error is measured on those entries only.
pub fn grad_check_sampled(
    f: impl Fn() -> Result<Tensor>,
    vars: &[(String, Var)],
    eps: f64,
    max_entries: usize,
    seed: u64,
) -> Result<GradReport> {
    let grads = f()?.sum_all()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = Vec::with_capacity(vars.len());
    for (name, var) in vars {
        let original = var.as_tensor().copy()?;
        let flat: Vec<f64> = original.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?,
            None => vec![0.0; flat.len()],
        };
        let mut idx: Vec<usize> = (0..flat.len()).collect();
        if flat.len() > max_entries {
            for i in 0..max_entries {
                let j = rng.random_range(i..idx.len());
                idx.swap(i, j);
            }
            idx.truncate(max_entries);
        }
        let (mut diff2, mut num2, mut ana2) = (0.0f64, 0.0f64, 0.0f64);
        let mut work = flat.clone();
        for &i in &idx {
            work[i] = flat[i] + eps;
            var.set(&Tensor::from_slice(&work, original.shape(), original.device())?.to_dtype(original.dtype())?)?;
            let plus = scalar(&f)?;
            work[i] = flat[i] - eps;
            var.set(&Tensor::from_slice(&work, original.shape(), original.device())?.to_dtype(original.dtype())?)?;
            let minus = scalar(&f)?;
            work[i] = flat[i];
            let numeric = (plus - minus) / (2.0 * eps);
            diff2 += (analytic[i] - numeric).powi(2);
            num2 += numeric * numeric;
            ana2 += analytic[i] * analytic[i];
        }
        var.set(&original)?;
        raw.push((name.clone(), diff2.sqrt(), num2.sqrt(), ana2.sqrt()));
    }
    let floor = (raw.iter().map(|r| r.2).fold(0.0, f64::max) * 1e-6).max(1e-12);
    let per_var: Vec<(String, f64, f64)> = raw
        .into_iter()
        .map(|(name, diff, num, ana)| (name, diff / num.max(ana).max(floor), num))
        .collect();
    let max_rel_error = per_var.iter().map(|v| v.1).fold(0.0, f64::max);
    Ok(GradReport { per_var, max_rel_error })
}
