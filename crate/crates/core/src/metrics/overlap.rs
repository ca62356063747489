//! Mask overlap and SDF-value error metrics.

use crate::csdf::CsdfModel;
use crate::error::{CoreError, Result};
use crate::render::{render_binary_mask, ProbeParams};
use crate::shapegen::{Mask, SdfSample};

/// `(Dice, IoU)` of two binary masks; two empty masks score `(1, 1)`.
pub fn dice_iou(a: &Mask, b: &Mask) -> Result<(f64, f64)> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(CoreError::ShapeMismatch(format!(
            "masks are {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        na += usize::from(x);
        nb += usize::from(y);
    }
    if na + nb == 0 {
        return Ok((1.0, 1.0));
    }
    let union = na + nb - inter;
    Ok((2.0 * inter as f64 / (na + nb) as f64, inter as f64 / union as f64))
}

/// Renders the decoder through `probe` at the mask's resolution, binarizes
/// at 0.5, and scores against `gt`.
pub fn projected_dice(model: &CsdfModel, z: &[f64], probe: &ProbeParams, gt: &Mask, alpha: f64) -> Result<(f64, f64)> {
    model.check_latent(z)?;
    let pred = render_binary_mask(model, z, probe, gt.height, gt.width, alpha);
    dice_iou(&pred, gt)
}

/// `(MAE, RMSE)` between predicted and reference SDF values, times `mm_scale`.
pub fn sdf_errors(pred: &[f64], gt: &[f64], mm_scale: f64) -> Result<(f64, f64)> {
    if pred.is_empty() {
        return Err(CoreError::Empty("SDF samples"));
    }
    if pred.len() != gt.len() {
        return Err(CoreError::ShapeMismatch(format!("{} predictions for {} samples", pred.len(), gt.len())));
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        let e = p - g;
        abs += e.abs();
        sq += e * e;
    }
    Ok((abs / n * mm_scale, (sq / n).sqrt() * mm_scale))
}

pub fn surface_sdf_errors(model: &CsdfModel, z: &[f64], samples: &[SdfSample], mm_scale: f64) -> Result<(f64, f64)> {
    model.check_latent(z)?;
    let pts: Vec<_> = samples.iter().map(|s| s.point).collect();
    let gt: Vec<f64> = samples.iter().map(|s| s.distance).collect();
    sdf_errors(&model.eval_many(z, &pts), &gt, mm_scale)
}
