use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{DbpError, Result};

/// Splits a `C x H x W` image into raster-ordered, non-overlapping patches.
///
/// Each row holds one patch flattened channel-major, then row-major, so the
/// row length is `patch_size^2 * C`.
pub fn patchify(image: ArrayView3<'_, f64>, patch_size: usize) -> Result<Array2<f64>> {
    let (c, h, w) = image.dim();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(DbpError::Shape(format!(
            "image {h}x{w} is not divisible into {patch_size}x{patch_size} patches"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let pp = patch_size * patch_size;
    let mut out = Array2::zeros((gh * gw, pp * c));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            for ch in 0..c {
                for i in 0..patch_size {
                    for j in 0..patch_size {
                        row[ch * pp + i * patch_size + j] =
                            image[[ch, gy * patch_size + i, gx * patch_size + j]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: ArrayView2<'_, f64>,
    patch_size: usize,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Array3<f64>> {
    let pp = patch_size * patch_size;
    if patch_size == 0 || !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
        return Err(DbpError::Shape(format!(
            "image {height}x{width} is not divisible into {patch_size}x{patch_size} patches"
        )));
    }
    let (gh, gw) = (height / patch_size, width / patch_size);
    if patches.dim() != (gh * gw, pp * channels) {
        return Err(DbpError::Shape(format!(
            "expected {}x{} patch matrix, got {:?}",
            gh * gw,
            pp * channels,
            patches.dim()
        )));
    }
    let mut image = Array3::zeros((channels, height, width));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = patches.row(gy * gw + gx);
            for ch in 0..channels {
                for i in 0..patch_size {
                    for j in 0..patch_size {
                        image[[ch, gy * patch_size + i, gx * patch_size + j]] =
                            row[ch * pp + i * patch_size + j];
                    }
                }
            }
        }
    }
    Ok(image)
}

/// Fixed 2-D sine-cosine positional embedding for a `grid x grid` patch layout.
///
/// The first half of each row encodes the patch row, the second half the column.
pub fn sincos_position_embedding(dim: usize, grid: usize) -> Result<Array2<f64>> {
    if !dim.is_multiple_of(4) {
        return Err(DbpError::Config(format!(
            "positional embedding dim {dim} must be divisible by 4"
        )));
    }
    let quarter = dim / 4;
    let mut out = Array2::zeros((grid * grid, dim));
    for gy in 0..grid {
        for gx in 0..grid {
            let mut row = out.row_mut(gy * grid + gx);
            for (half, coord) in [(0, gy), (1, gx)] {
                let base = half * dim / 2;
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    let angle = coord as f64 * omega;
                    row[base + i] = angle.sin();
                    row[base + quarter + i] = angle.cos();
                }
            }
        }
    }
    Ok(out)
}
