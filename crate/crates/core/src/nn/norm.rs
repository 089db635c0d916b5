use ndarray::{Array1, Array2, ArrayView2, Axis, Ix1, Zip};

use super::{join, Param, ParamView, Parameters};
use crate::error::{DbpError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Layer normalization over the feature axis with learnable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param<Ix1>,
    pub beta: Param<Ix1>,
    eps: f64,
    cache: Option<(Array2<f64>, Array1<f64>)>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(Array1::ones(dim), false),
            beta: Param::new(Array1::zeros(dim), false),
            eps: LAYER_NORM_EPS,
            cache: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let d = self.dim();
        if x.ncols() != d {
            return Err(DbpError::Shape(format!(
                "layer norm over {d} features got {} columns",
                x.ncols()
            )));
        }
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
            let mean = row.sum() / d as f64;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            *r = 1.0 / (var + self.eps).sqrt();
            row *= *r;
        }
        let mut y = &xhat * &self.gamma.value;
        y += &self.beta.value;
        self.cache = Some((xhat, rstd));
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let (xhat, rstd) = self
            .cache
            .as_ref()
            .ok_or_else(|| DbpError::State("layer norm backward called before forward".into()))?;
        if grad_out.dim() != xhat.dim() {
            return Err(DbpError::Shape(format!(
                "layer norm gradient {:?} does not match activation {:?}",
                grad_out.dim(),
                xhat.dim()
            )));
        }
        self.gamma.grad += &(&grad_out * xhat).sum_axis(Axis(0));
        self.beta.grad += &grad_out.sum_axis(Axis(0));

        let d = self.dim() as f64;
        let mut dxhat = &grad_out * &self.gamma.value;
        Zip::from(dxhat.rows_mut())
            .and(xhat.rows())
            .and(rstd)
            .for_each(|mut g, xh, &r| {
                let mean_g = g.sum() / d;
                let mean_gx = g.dot(&xh) / d;
                Zip::from(&mut g).and(&xh).for_each(|gi, &xi| {
                    *gi = r * (*gi - mean_g - xi * mean_gx);
                });
            });
        Ok(dxhat)
    }
}

impl Parameters for LayerNorm {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        out.push(self.gamma.view(join(prefix, "gamma")));
        out.push(self.beta.view(join(prefix, "beta")));
    }
}
