use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DbpError, Result};

/// Which patches of one image the encoder sees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible_indices: Vec<usize>,
    pub masked_indices: Vec<usize>,
    pub seed: u64,
}

/// `round(mask_ratio * patches)`.
pub fn masked_count(patches: usize, mask_ratio: f64) -> usize {
    ((mask_ratio * patches as f64).round() as usize).min(patches)
}

impl MaskPlan {
    /// Masks `round(mask_ratio * patches)` patches chosen uniformly without replacement.
    pub fn generate(patches: usize, mask_ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&mask_ratio) {
            return Err(DbpError::Config(format!(
                "mask ratio must be in [0, 1), got {mask_ratio}"
            )));
        }
        let n_masked = masked_count(patches, mask_ratio);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masked = rand::seq::index::sample(&mut rng, patches, n_masked).into_vec();
        masked.sort_unstable();
        let mut is_masked = vec![false; patches];
        for &m in &masked {
            is_masked[m] = true;
        }
        let visible = (0..patches).filter(|&i| !is_masked[i]).collect();
        Ok(Self {
            visible_indices: visible,
            masked_indices: masked,
            seed,
        })
    }

    /// Plan with every patch visible.
    pub fn unmasked(patches: usize) -> Self {
        Self {
            visible_indices: (0..patches).collect(),
            masked_indices: Vec::new(),
            seed: 0,
        }
    }

    pub fn patch_count(&self) -> usize {
        self.visible_indices.len() + self.masked_indices.len()
    }
}
