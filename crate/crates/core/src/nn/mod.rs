//! Layers with hand-written forward and reverse-mode backward passes.
//!
//! Activations are 2-D matrices whose rows are tokens. Sequence-aware layers
//! (attention) take the number of tokens per sequence so that `rows = batch * tokens`.

mod activation;
mod attention;
mod block;
mod linear;
mod norm;

pub use activation::{
    gelu, gelu_backward, gelu_derivative, gelu_with_derivative, softmax_backward, softmax_rows,
    softmax_rows_inplace,
};
pub use attention::MultiHeadAttention;
pub use block::{BlockSite, EncoderBlock};
pub use linear::{DecorrelatedLinear, LinearGrads};
pub use norm::{LayerNorm, LAYER_NORM_EPS};

use ndarray::{Array, Dimension};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<D: Dimension> {
    pub value: Array<f64, D>,
    pub grad: Array<f64, D>,
    /// Whether decoupled weight decay applies to this tensor.
    pub decay: bool,
}

impl<D: Dimension> Param<D> {
    pub fn new(value: Array<f64, D>, decay: bool) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Self { value, grad, decay }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn view(&mut self, name: String) -> ParamView<'_> {
        let shape = self.value.shape().to_vec();
        ParamView {
            name,
            shape,
            value: self
                .value
                .as_slice_memory_order_mut()
                .expect("parameters are contiguous"),
            grad: self
                .grad
                .as_slice_memory_order_mut()
                .expect("gradients are contiguous"),
            decay: self.decay,
        }
    }
}

/// Flat mutable access to one parameter, as seen by optimizers and checkpoints.
#[derive(Debug)]
pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
    pub decay: bool,
}

/// Anything that owns trainable parameters.
pub trait Parameters {
    /// Appends every parameter, named `prefix` + local path, in a fixed order.
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamView<'a>>);

    fn params(&mut self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for p in self.params() {
            p.grad.fill(0.0);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Glorot-uniform matrix of shape `rows x cols` (fan-in `cols`, fan-out `rows`).
pub(crate) fn xavier_uniform<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> ndarray::Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    ndarray::Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}
