use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{DbpError, Result};

/// Spatially correlated Gaussian images: white noise blurred by an isotropic
/// Gaussian of standard deviation `correlation_length` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub channels: usize,
    pub size: usize,
    pub correlation_length: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 4480,
            channels: 3,
            size: 32,
            correlation_length: 2.0,
            seed: 0,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable blur with periodic boundaries.
fn blur(plane: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let r = (kernel.len() / 2) as isize;
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[[y, wrap(x as isize + k as isize - r, w)]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[[wrap(y as isize + k as isize - r, h), x]])
                .sum();
        }
    }
    out
}

/// Generates `spec.count` images, each standardized to zero mean and unit variance.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.count == 0 || spec.channels == 0 || spec.size == 0 {
        return Err(DbpError::Config("synthetic count, channels and size must be positive".into()));
    }
    if !(spec.correlation_length >= 0.0 && spec.correlation_length.is_finite()) {
        return Err(DbpError::Config(format!(
            "correlation_length must be non-negative, got {}",
            spec.correlation_length
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let kernel = (spec.correlation_length > 0.0).then(|| gaussian_kernel(spec.correlation_length));
    let plane = spec.size * spec.size;
    let mut data = Vec::with_capacity(spec.count * spec.channels * plane);
    let mut image = vec![0.0f64; spec.channels * plane];
    for _ in 0..spec.count {
        for c in 0..spec.channels {
            let noise = Array2::from_shape_simple_fn((spec.size, spec.size), || {
                StandardNormal.sample(&mut rng)
            });
            let field = match &kernel {
                Some(k) => blur(&noise, k),
                None => noise,
            };
            image[c * plane..(c + 1) * plane].copy_from_slice(field.as_slice().expect("contiguous"));
        }
        let n = image.len() as f64;
        let mean = image.iter().sum::<f64>() / n;
        let var = image.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / var.sqrt().max(1e-12);
        data.extend(image.iter().map(|v| ((v - mean) * inv) as f32));
    }
    Dataset::new(spec.channels, spec.size, spec.size, data)
}
