use ndarray::{Array3, ArrayView3, Axis};

use super::MaskPlan;
use crate::error::{DbpError, Result};

/// Patch positions that contribute to the loss for one image.
fn scored<'p>(plan: &'p MaskPlan, masked_only: bool) -> Box<dyn Iterator<Item = usize> + 'p> {
    if masked_only {
        Box::new(plan.masked_indices.iter().copied())
    } else {
        Box::new(0..plan.patch_count())
    }
}

fn check(
    recon: &ArrayView3<'_, f64>,
    target: &ArrayView3<'_, f64>,
    plans: &[MaskPlan],
    masked_only: bool,
) -> Result<usize> {
    if recon.dim() != target.dim() {
        return Err(DbpError::Shape(format!(
            "reconstruction {:?} and target {:?} differ",
            recon.dim(),
            target.dim()
        )));
    }
    let (b, p, _) = recon.dim();
    if plans.len() != b || plans.iter().any(|pl| pl.patch_count() != p) {
        return Err(DbpError::Shape(format!(
            "need {b} mask plans over {p} patches"
        )));
    }
    let mut scored_entries = 0;
    for plan in plans {
        let n = scored(plan, masked_only).count();
        if n == 0 {
            return Err(DbpError::Shape(
                "loss over masked patches needs at least one masked patch per image".into(),
            ));
        }
        scored_entries += n;
    }
    Ok(scored_entries)
}

/// Per-image mean squared error over the scored patches, averaged over the batch.
pub fn mae_loss(
    recon: ArrayView3<'_, f64>,
    target: ArrayView3<'_, f64>,
    plans: &[MaskPlan],
    masked_only: bool,
) -> Result<f64> {
    check(&recon, &target, plans, masked_only)?;
    let patch_dim = recon.len_of(Axis(2)) as f64;
    let mut total = 0.0;
    for (b, plan) in plans.iter().enumerate() {
        let mut sum = 0.0;
        let mut n = 0usize;
        for p in scored(plan, masked_only) {
            let r = recon.index_axis(Axis(0), b);
            let t = target.index_axis(Axis(0), b);
            sum += r
                .row(p)
                .iter()
                .zip(t.row(p).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            n += 1;
        }
        total += sum / (n as f64 * patch_dim);
    }
    Ok(total / plans.len() as f64)
}

/// Gradient of [`mae_loss`] with respect to the reconstruction.
pub fn mae_loss_grad(
    recon: ArrayView3<'_, f64>,
    target: ArrayView3<'_, f64>,
    plans: &[MaskPlan],
    masked_only: bool,
) -> Result<Array3<f64>> {
    check(&recon, &target, plans, masked_only)?;
    let patch_dim = recon.len_of(Axis(2)) as f64;
    let batch = plans.len() as f64;
    let mut grad = Array3::zeros(recon.raw_dim());
    for (b, plan) in plans.iter().enumerate() {
        let n = scored(plan, masked_only).count() as f64;
        let scale = 2.0 / (n * patch_dim * batch);
        for p in scored(plan, masked_only) {
            for k in 0..recon.len_of(Axis(2)) {
                grad[[b, p, k]] = scale * (recon[[b, p, k]] - target[[b, p, k]]);
            }
        }
    }
    Ok(grad)
}

/// Standardizes every target patch to zero mean and unit variance.
pub fn normalize_patch_targets(target: &mut Array3<f64>) {
    const EPS: f64 = 1e-6;
    for mut image in target.axis_iter_mut(Axis(0)) {
        for mut patch in image.axis_iter_mut(Axis(0)) {
            let n = patch.len() as f64;
            let mean = patch.sum() / n;
            let var = patch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + EPS).sqrt();
            patch.mapv_inplace(|v| (v - mean) * inv);
        }
    }
}
