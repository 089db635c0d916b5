use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, ArrayView3, Axis};
use rand::Rng;

use crate::error::{DbpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Bilinear,
    Bicubic,
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interpolation::Bilinear => "bilinear",
            Interpolation::Bicubic => "bicubic",
        })
    }
}

impl FromStr for Interpolation {
    type Err = DbpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Interpolation::Bilinear),
            "bicubic" => Ok(Interpolation::Bicubic),
            other => Err(DbpError::Config(format!("unknown interpolation `{other}`"))),
        }
    }
}

/// Pre-training augmentation: random resized crop, horizontal flip, normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub random_crop: bool,
    /// Crop area as a fraction of the source area, sampled uniformly.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub interpolation: Interpolation,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            random_crop: true,
            crop_scale: (0.2, 1.0),
            flip_prob: 0.5,
            interpolation: Interpolation::Bilinear,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(DbpError::Config(format!(
                "augment crop scale must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(DbpError::Config(format!(
                "augment.flip_prob must be in [0, 1], got {}",
                self.flip_prob
            )));
        }
        Ok(())
    }
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn apply(&self, image: &mut Array3<f64>) {
        for (c, mut plane) in image.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c].max(1e-12));
            plane.mapv_inplace(|v| (v - m) / s);
        }
    }
}

fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t.powi(3) - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t.powi(3) - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Resamples the window `[top, top + crop_h) x [left, left + crop_w)` to `out_h x out_w`
/// with half-pixel-centre alignment and clamped borders.
pub fn resize_crop(
    image: ArrayView3<'_, f64>,
    top: usize,
    left: usize,
    crop_h: usize,
    crop_w: usize,
    out_h: usize,
    out_w: usize,
    interp: Interpolation,
) -> Array3<f64> {
    let (c, h, w) = image.dim();
    let sy = crop_h as f64 / out_h as f64;
    let sx = crop_w as f64 / out_w as f64;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = Array3::zeros((c, out_h, out_w));
    for y in 0..out_h {
        let fy = (y as f64 + 0.5) * sy - 0.5 + top as f64;
        for x in 0..out_w {
            let fx = (x as f64 + 0.5) * sx - 0.5 + left as f64;
            let (y0, x0) = (fy.floor(), fx.floor());
            let (dy, dx) = (fy - y0, fx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for ch in 0..c {
                let v = match interp {
                    Interpolation::Bilinear => {
                        let p = |yy: isize, xx: isize| image[[ch, clamp(yy, h), clamp(xx, w)]];
                        let top_row = p(y0, x0) * (1.0 - dx) + p(y0, x0 + 1) * dx;
                        let bottom_row = p(y0 + 1, x0) * (1.0 - dx) + p(y0 + 1, x0 + 1) * dx;
                        top_row * (1.0 - dy) + bottom_row * dy
                    }
                    Interpolation::Bicubic => {
                        let mut acc = 0.0;
                        for i in -1..=2isize {
                            let wy = cubic_weight(dy - i as f64);
                            for j in -1..=2isize {
                                let wx = cubic_weight(dx - j as f64);
                                acc += wy * wx * image[[ch, clamp(y0 + i, h), clamp(x0 + j, w)]];
                            }
                        }
                        acc
                    }
                };
                out[[ch, y, x]] = v;
            }
        }
    }
    out
}

pub fn flip_horizontal(image: &Array3<f64>) -> Array3<f64> {
    let mut out = image.clone();
    out.invert_axis(Axis(2));
    out.as_standard_layout().into_owned()
}

/// Applies crop (if enabled), flip and normalization. Output has the input shape.
pub fn augment<R: Rng + ?Sized>(
    image: ArrayView3<'_, f64>,
    rng: &mut R,
    config: &AugmentConfig,
    norm: &Normalization,
) -> Array3<f64> {
    let (_, h, w) = image.dim();
    let mut out = if config.random_crop {
        let (lo, hi) = config.crop_scale;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let side = scale.sqrt();
        let crop_h = ((side * h as f64).round() as usize).clamp(1, h);
        let crop_w = ((side * w as f64).round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - crop_h);
        let left = rng.random_range(0..=w - crop_w);
        resize_crop(image, top, left, crop_h, crop_w, h, w, config.interpolation)
    } else {
        image.to_owned()
    };
    if config.flip_prob > 0.0 && rng.random::<f64>() < config.flip_prob {
        out = flip_horizontal(&out);
    }
    norm.apply(&mut out);
    out
}
