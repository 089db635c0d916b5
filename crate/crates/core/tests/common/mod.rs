#![allow(dead_code)]

pub mod gradcheck;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Identity plus a small random perturbation.
pub fn near_identity(dim: usize, scale: f64, rng: &mut impl Rng) -> Array2<f64> {
    let mut m = randn(dim, dim, rng) * scale;
    for i in 0..dim {
        m[[i, i]] += 1.0;
    }
    m
}

/// Triple-loop matrix product.
pub fn naive_matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.nrows());
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[[i, k]] * b[[k, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

/// `C[i][j] = sum_n z[n][i] z[n][j] / N` for `i != j`, zero on the diagonal.
pub fn brute_force_covariance(z: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, d) = z.dim();
    let mut c = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let mut s = 0.0;
            for r in 0..n {
                s += z[[r, i]] * z[[r, j]];
            }
            c[[i, j]] = s / n as f64;
        }
    }
    c
}

pub fn max_abs_diff(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x` for the listed coordinates.
pub fn central_diff(x: &mut [f64], coords: &[usize], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn weighted_sum(out: ArrayView2<'_, f64>, weights: ArrayView2<'_, f64>) -> f64 {
    out.iter().zip(weights.iter()).map(|(a, b)| a * b).sum()
}

/// Samples from a Gaussian with unit variances and every covariance equal to `rho`.
pub fn equicorrelated(n: usize, d: usize, rho: f64, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    let shared = randn(n, 1, &mut r);
    let own = randn(n, d, &mut r);
    &own * (1.0 - rho).sqrt() + &(&shared * rho.sqrt())
}

/// Desk model on a few dozen synthetic images; runs in well under a second per epoch.
pub fn tiny_config(dir: &std::path::Path) -> dbp_core::harness::TrainConfig {
    use dbp_core::data::SyntheticSpec;
    use dbp_core::harness::{Clock, DataSource, TrainConfig};
    TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 12,
        val_fraction: 0.25,
        data: DataSource::Synthetic(SyntheticSpec {
            count: 48,
            ..SyntheticSpec::default()
        }),
        output_dir: dir.to_path_buf(),
        clock: Clock::Off,
        ..TrainConfig::default()
    }
}
