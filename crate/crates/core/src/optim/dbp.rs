use rand::Rng;

use crate::decorr::{off_diagonal_covariance, subsample_rows, DecorrConfig};
use crate::error::{DbpError, Result};
use crate::nn::DecorrelatedLinear;

/// Updates the decorrelation matrix of every layer in `sites` from the input it
/// cached on the last forward pass. Layers without a matrix are skipped, and
/// nothing happens once `epoch` reaches the configured stop epoch.
///
/// Each site draws its own subsample from `rng`, in iteration order.
/// `epoch` counts from zero; divergence errors report it counting from one.
/// Returns the number of matrices updated.
pub fn dbp_step<'a, R, I>(sites: I, config: &DecorrConfig, epoch: usize, rng: &mut R) -> Result<usize>
where
    R: Rng + ?Sized,
    I: IntoIterator<Item = &'a mut DecorrelatedLinear>,
{
    if !config.active_at(epoch) {
        return Ok(0);
    }
    let mut updated = 0;
    for linear in sites {
        if linear.decorr().is_none() {
            continue;
        }
        let estimate = {
            let z = linear.cached_input().ok_or_else(|| {
                DbpError::State(format!(
                    "site `{}` has no cached input for the decorrelation update",
                    linear.decorr().map(|r| r.site_id()).unwrap_or_default()
                ))
            })?;
            let sample = subsample_rows(z.view(), config.subsample_fraction, rng)?;
            off_diagonal_covariance(sample.view())?
        };
        let r = linear.decorr_mut().expect("checked above");
        r.apply_update(&estimate, config.eta, epoch + 1)?;
        updated += 1;
    }
    Ok(updated)
}
