//! Iterative input decorrelation.
//!
//! Each decorrelated site owns a square matrix `R` (initialised to the identity)
//! that maps a layer input `x` to `z = R x` before the layer's weight is applied.
//! After every mini-batch the matrix is nudged by `R <- R - eta * C * R`, where `C`
//! is the uncentered covariance of the decorrelated inputs with its diagonal
//! zeroed. Rows of every batch matrix are samples; for token sequences the caller
//! flattens `batch x tokens` into rows first.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{DbpError, Result};

/// Entries above this magnitude are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Which part of the model carries decorrelation sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scope {
    #[default]
    EncoderOnly,
    FullModel,
    DecoderOnly,
}

impl Scope {
    pub fn includes_encoder(self) -> bool {
        matches!(self, Scope::EncoderOnly | Scope::FullModel)
    }

    pub fn includes_decoder(self) -> bool {
        matches!(self, Scope::DecoderOnly | Scope::FullModel)
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::EncoderOnly => "encoder",
            Scope::FullModel => "full",
            Scope::DecoderOnly => "decoder",
        })
    }
}

impl FromStr for Scope {
    type Err = DbpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "encoder" | "encoder_only" | "encoderonly" => Ok(Scope::EncoderOnly),
            "full" | "full_model" | "fullmodel" => Ok(Scope::FullModel),
            "decoder" | "decoder_only" | "decoderonly" => Ok(Scope::DecoderOnly),
            other => Err(DbpError::Config(format!("unknown decorrelation scope `{other}`"))),
        }
    }
}

/// Hyperparameters of the decorrelation update.
#[derive(Debug, Clone, PartialEq)]
pub struct DecorrConfig {
    /// Learning rate of the `R` update. Constant for the whole run.
    pub eta: f64,
    /// Share of cached rows used to estimate `C`, in `(0, 1]`.
    pub subsample_fraction: f64,
    pub scope: Scope,
    /// First epoch in which `R` is no longer updated. `None` means never stop.
    pub stop_epoch: Option<usize>,
    /// Also decorrelate the inputs of the attention output projection and the
    /// second MLP linear.
    pub per_linear_mode: bool,
}

impl Default for DecorrConfig {
    fn default() -> Self {
        Self {
            eta: 5.0e-4,
            subsample_fraction: 0.10,
            scope: Scope::EncoderOnly,
            stop_epoch: None,
            per_linear_mode: false,
        }
    }
}

impl DecorrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(DbpError::Config(format!(
                "decorr.subsample_fraction must be in (0, 1], got {}",
                self.subsample_fraction
            )));
        }
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(DbpError::Config(format!(
                "decorr.eta must be a non-negative finite number, got {}",
                self.eta
            )));
        }
        Ok(())
    }

    /// Whether `R` is still being learned during `epoch`.
    pub fn active_at(&self, epoch: usize) -> bool {
        self.stop_epoch.is_none_or(|stop| epoch < stop)
    }
}

/// Square decorrelation matrix owned by one site.
#[derive(Debug, Clone, PartialEq)]
pub struct DecorrelationMatrix {
    site_id: String,
    values: Array2<f64>,
}

impl DecorrelationMatrix {
    pub fn identity(site_id: impl Into<String>, dim: usize) -> Self {
        assert!(dim > 0, "decorrelation matrix needs a positive dimension");
        Self {
            site_id: site_id.into(),
            values: Array2::eye(dim),
        }
    }

    pub fn from_values(site_id: impl Into<String>, values: Array2<f64>) -> Result<Self> {
        let site_id = site_id.into();
        let (rows, cols) = values.dim();
        if rows != cols || rows == 0 {
            return Err(DbpError::Shape(format!(
                "decorrelation matrix for `{site_id}` must be square and non-empty, got {rows}x{cols}"
            )));
        }
        Ok(Self { site_id, values })
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn site_id(&self) -> &str {
        &self.site_id
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn is_identity(&self) -> bool {
        self.values.indexed_iter().all(|((i, j), &v)| v == if i == j { 1.0 } else { 0.0 })
    }

    /// In-place `R <- R - eta * C * R`. On divergence the matrix is left untouched.
    pub fn apply_update(&mut self, c: &CorrelationEstimate, eta: f64, epoch: usize) -> Result<()> {
        let next = updated_values(self, c, eta, epoch)?;
        self.values = next;
        Ok(())
    }
}

/// Off-diagonal part of the uncentered covariance of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationEstimate {
    off_diag: Array2<f64>,
    sample_count: usize,
}

impl CorrelationEstimate {
    pub fn off_diag(&self) -> &Array2<f64> {
        &self.off_diag
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn dim(&self) -> usize {
        self.off_diag.nrows()
    }

    /// Builds an estimate from an arbitrary square matrix; the diagonal is zeroed.
    pub fn from_matrix(mut m: Array2<f64>, sample_count: usize) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(DbpError::Shape(format!(
                "correlation estimate must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        m.diag_mut().fill(0.0);
        Ok(Self {
            off_diag: m,
            sample_count,
        })
    }
}

/// `z = R x` for every row `x` of the batch.
pub fn decorrelate(r: &DecorrelationMatrix, x_batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x_batch.ncols() != r.dim() {
        return Err(DbpError::DimensionMismatch {
            site: r.site_id.clone(),
            expected: r.dim(),
            got: x_batch.ncols(),
        });
    }
    Ok(x_batch.dot(&r.values.t()))
}

/// `D = Z^T Z / N` with its diagonal set to zero.
pub fn off_diagonal_covariance(z_batch: ArrayView2<'_, f64>) -> Result<CorrelationEstimate> {
    let n = z_batch.nrows();
    if n == 0 {
        return Err(DbpError::EmptyBatch);
    }
    let mut d = z_batch.t().dot(&z_batch);
    d /= n as f64;
    // mirror the upper triangle
    let dim = d.nrows();
    for i in 0..dim {
        d[[i, i]] = 0.0;
        for j in (i + 1)..dim {
            d[[j, i]] = d[[i, j]];
        }
    }
    Ok(CorrelationEstimate {
        off_diag: d,
        sample_count: n,
    })
}

/// Number of rows kept when subsampling `n` rows at `fraction`.
pub fn subsample_count(n: usize, fraction: f64) -> usize {
    // 0.07 * 100 must not round up to 8
    let m = (fraction * n as f64 - 1e-9).ceil() as usize;
    m.clamp(1, n.max(1))
}

/// Chooses `max(1, ceil(fraction * N))` rows uniformly without replacement.
/// Selected rows keep their original relative order.
pub fn subsample_rows<R: Rng + ?Sized>(
    z_batch: ArrayView2<'_, f64>,
    fraction: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DbpError::Config(format!(
            "subsample fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = z_batch.nrows();
    if n == 0 {
        return Err(DbpError::EmptyBatch);
    }
    let m = subsample_count(n, fraction);
    if m == n {
        return Ok(z_batch.to_owned());
    }
    let mut idx = rand::seq::index::sample(rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(z_batch.select(Axis(0), &idx))
}

fn updated_values(
    r: &DecorrelationMatrix,
    c: &CorrelationEstimate,
    eta: f64,
    epoch: usize,
) -> Result<Array2<f64>> {
    if c.dim() != r.dim() {
        return Err(DbpError::DimensionMismatch {
            site: r.site_id.clone(),
            expected: r.dim(),
            got: c.dim(),
        });
    }
    let mut next = c.off_diag.dot(&r.values);
    next.zip_mut_with(&r.values, |cr, &rv| *cr = rv - eta * *cr);
    if next.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
        return Err(DbpError::NumericalDivergence {
            site: r.site_id.clone(),
            epoch,
        });
    }
    Ok(next)
}

/// Functional form of the update: returns `R - eta * C * R`.
pub fn update_decorrelation(
    r: &DecorrelationMatrix,
    c: &CorrelationEstimate,
    eta: f64,
    epoch: usize,
) -> Result<DecorrelationMatrix> {
    let values = updated_values(r, c, eta, epoch)?;
    Ok(DecorrelationMatrix {
        site_id: r.site_id.clone(),
        values,
    })
}

/// Mean of the squared off-diagonal entries.
pub fn decorrelation_loss(c: &CorrelationEstimate) -> Result<f64> {
    let d = c.dim();
    if d < 2 {
        return Err(DbpError::UndefinedLoss(d));
    }
    let sum_sq: f64 = c
        .off_diag
        .indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|(_, v)| v * v)
        .sum();
    Ok(sum_sq / (d * (d - 1)) as f64)
}

/// `W~ = W R`, so that `W~ x = W (R x)`.
pub fn fuse_weights(w: ArrayView2<'_, f64>, r: &DecorrelationMatrix) -> Result<Array2<f64>> {
    if w.ncols() != r.dim() {
        return Err(DbpError::DimensionMismatch {
            site: r.site_id.clone(),
            expected: r.dim(),
            got: w.ncols(),
        });
    }
    if r.is_identity() {
        return Ok(w.to_owned());
    }
    Ok(w.dot(&r.values))
}
