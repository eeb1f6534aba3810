//! Segmentation losses on probability maps.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Additive smoothing of the dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

fn check(p: &Tensor, y: &Tensor) -> Result<()> {
    if p.dims() != y.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            p.dims(),
            y.dims()
        )));
    }
    Ok(())
}

/// `1 - (2 sum(p y) + 1) / (sum(p) + sum(y) + 1)`.
///
/// A rank-4 `(batch, 1, h, w)` input is scored per sample and averaged over the
/// batch; any other rank is scored as one sample.
pub fn dice_loss(p: &Tensor, y: &Tensor) -> Result<Tensor> {
    check(p, y)?;
    let (p, y) = if p.rank() == 4 {
        (p.flatten_from(1)?, y.flatten_from(1)?)
    } else {
        (p.flatten_all()?.unsqueeze(0)?, y.flatten_all()?.unsqueeze(0)?)
    };
    let inter = (&p * &y)?.sum(1)?;
    let denom = ((p.sum(1)? + y.sum(1)?)? + DICE_SMOOTH)?;
    let ratio = ((inter * 2.0)? + DICE_SMOOTH)?.div(&denom)?;
    Ok(ratio.affine(-1.0, 1.0)?.mean_all()?)
}

/// Mean pixelwise binary cross-entropy with clamped probabilities.
pub fn bce(p: &Tensor, y: &Tensor) -> Result<Tensor> {
    check(p, y)?;
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let pos = (y * p.log()?)?;
    let neg = (y.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// Average of dice loss and binary cross-entropy.
pub fn combined_loss(p: &Tensor, y: &Tensor) -> Result<Tensor> {
    Ok(((dice_loss(p, y)? + bce(p, y)?)? * 0.5)?)
}
