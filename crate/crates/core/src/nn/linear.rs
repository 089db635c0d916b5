use ndarray::{Array1, Array2, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;

use super::{join, xavier_uniform, Param, ParamView, Parameters};
use crate::decorr::{decorrelate, fuse_weights, DecorrelationMatrix};
use crate::error::{DbpError, Result};

/// Affine layer `y = W (R x) + b` with an optional decorrelation matrix `R`.
///
/// `R` is a constant of the forward graph: it receives no gradient from the task
/// loss and is only changed by the decorrelation update. The decorrelated input
/// `z = R x` is cached on every forward pass, both for the weight gradient and
/// for estimating input correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct DecorrelatedLinear {
    pub weight: Param<Ix2>,
    pub bias: Param<Ix1>,
    decorr: Option<DecorrelationMatrix>,
    cached_input: Option<Array2<f64>>,
}

/// Gradients of one backward pass through a [`DecorrelatedLinear`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub grad_x: Array2<f64>,
    pub grad_w: Array2<f64>,
    pub grad_b: Array1<f64>,
}

impl DecorrelatedLinear {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self::from_parts(xavier_uniform(out_dim, in_dim, rng), Array1::zeros(out_dim))
    }

    pub fn from_parts(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        assert_eq!(weight.nrows(), bias.len(), "bias length must equal output dim");
        Self {
            weight: Param::new(weight, true),
            bias: Param::new(bias, false),
            decorr: None,
            cached_input: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    /// Attaches an identity decorrelation matrix labelled `site_id`.
    pub fn enable_decorrelation(&mut self, site_id: impl Into<String>) {
        self.decorr = Some(DecorrelationMatrix::identity(site_id, self.in_dim()));
    }

    pub fn set_decorrelation(&mut self, r: DecorrelationMatrix) -> Result<()> {
        if r.dim() != self.in_dim() {
            return Err(DbpError::DimensionMismatch {
                site: r.site_id().to_string(),
                expected: self.in_dim(),
                got: r.dim(),
            });
        }
        self.decorr = Some(r);
        Ok(())
    }

    pub fn decorr(&self) -> Option<&DecorrelationMatrix> {
        self.decorr.as_ref()
    }

    pub fn decorr_mut(&mut self) -> Option<&mut DecorrelationMatrix> {
        self.decorr.as_mut()
    }

    /// Input of the weight product from the last forward pass (`z`, or `x` without `R`).
    pub fn cached_input(&self) -> Option<&Array2<f64>> {
        self.cached_input.as_ref()
    }

    pub fn clear_cache(&mut self) {
        self.cached_input = None;
    }

    /// Replaces `(W, R)` by `W R` and drops `R`.
    pub fn fuse(&mut self) -> Result<()> {
        if let Some(r) = self.decorr.take() {
            self.weight.value = fuse_weights(self.weight.value.view(), &r)?;
        }
        Ok(())
    }

    pub fn forward(&mut self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(match &self.decorr {
                Some(r) => DbpError::DimensionMismatch {
                    site: r.site_id().to_string(),
                    expected: self.in_dim(),
                    got: x.ncols(),
                },
                None => DbpError::Shape(format!(
                    "linear layer expects {} input columns, got {}",
                    self.in_dim(),
                    x.ncols()
                )),
            });
        }
        let z = match &self.decorr {
            Some(r) => decorrelate(r, x)?,
            None => x.to_owned(),
        };
        let mut out = z.dot(&self.weight.value.t());
        out += &self.bias.value;
        self.cached_input = Some(z);
        Ok(out)
    }

    /// Gradients for `grad_out` without touching the accumulated parameter grads.
    pub fn gradients(&self, grad_out: ArrayView2<'_, f64>) -> Result<LinearGrads> {
        let z = self
            .cached_input
            .as_ref()
            .ok_or_else(|| DbpError::State("linear backward called before forward".into()))?;
        if grad_out.nrows() != z.nrows() || grad_out.ncols() != self.out_dim() {
            return Err(DbpError::Shape(format!(
                "upstream gradient {:?} does not match output {}x{}",
                grad_out.dim(),
                z.nrows(),
                self.out_dim()
            )));
        }
        let grad_w = grad_out.t().dot(z);
        let grad_b = grad_out.sum_axis(Axis(0));
        let grad_z = grad_out.dot(&self.weight.value);
        let grad_x = match &self.decorr {
            Some(r) => grad_z.dot(r.values()),
            None => grad_z,
        };
        Ok(LinearGrads {
            grad_x,
            grad_w,
            grad_b,
        })
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, grad_out: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let LinearGrads {
            grad_x,
            grad_w,
            grad_b,
        } = self.gradients(grad_out)?;
        self.weight.grad += &grad_w;
        self.bias.grad += &grad_b;
        Ok(grad_x)
    }
}

impl Parameters for DecorrelatedLinear {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        out.push(self.weight.view(join(prefix, "weight")));
        out.push(self.bias.view(join(prefix, "bias")));
    }
}
