use std::f64::consts::{FRAC_1_SQRT_2, PI};

use ndarray::{Array2, ArrayView2, Axis, Zip};
use libm::erf;

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * FRAC_1_SQRT_2))
}

/// `d/dx [x Phi(x)] = Phi(x) + x phi(x)`.
pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// GELU of every entry together with its derivative, sharing one `erf` per entry.
pub fn gelu_with_derivative(x: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
    let mut y = Array2::zeros(x.raw_dim());
    let mut dy = Array2::zeros(x.raw_dim());
    let norm = 1.0 / (2.0 * PI).sqrt();
    Zip::from(&mut y).and(&mut dy).and(&x).for_each(|y, dy, &x| {
        let cdf = 0.5 * (1.0 + erf(x * FRAC_1_SQRT_2));
        *y = x * cdf;
        *dy = cdf + x * norm * (-0.5 * x * x).exp();
    });
    (y, dy)
}

/// Gradient w.r.t. the GELU input `x`.
pub fn gelu_backward(x: ArrayView2<'_, f64>, grad_out: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut g = grad_out.to_owned();
    Zip::from(&mut g).and(&x).for_each(|g, &x| *g *= gelu_derivative(x));
    g
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut y = x.as_standard_layout().into_owned();
    softmax_rows_inplace(&mut y);
    y
}

pub fn softmax_rows_inplace(y: &mut Array2<f64>) {
    let cols = y.ncols();
    if cols == 0 {
        return;
    }
    let Some(data) = y.as_slice_mut() else {
        for mut row in y.axis_iter_mut(Axis(0)) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        return;
    };
    for row in data.chunks_exact_mut(cols) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Gradient w.r.t. softmax logits given the softmax output `y`.
pub fn softmax_backward(y: ArrayView2<'_, f64>, grad_out: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut g = &grad_out * &y;
    Zip::from(g.rows_mut()).and(y.rows()).for_each(|mut g, y| {
        let s = g.sum();
        Zip::from(&mut g).and(&y).for_each(|gi, &yi| *gi -= yi * s);
    });
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_at_zero() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu_derivative(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gelu_reference_points() {
        // x * Phi(x) with Phi(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-12);
        assert!((gelu(-1.0) + 1.0 - 0.8413447460685429).abs() < 1e-12);
    }

    #[test]
    fn fused_gelu_matches_separate() {
        let x = array![[-3.0, -0.5, 0.0], [0.25, 1.0, 4.0]];
        let (y, dy) = gelu_with_derivative(x.view());
        for ((&x, &y), &dy) in x.iter().zip(y.iter()).zip(dy.iter()) {
            assert!((y - gelu(x)).abs() < 1e-15);
            assert!((dy - gelu_derivative(x)).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let y = softmax_rows(array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -5.0]].view());
        for row in y.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((y[[1, 0]] - 0.5).abs() < 1e-12);
    }
}
