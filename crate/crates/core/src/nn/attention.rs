use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use super::activation::{softmax_backward, softmax_rows_inplace};
use super::{join, DecorrelatedLinear, ParamView, Parameters};
use crate::error::{DbpError, Result};

/// Multi-head scaled dot-product self-attention over fixed-length sequences.
///
/// One shared projection produces Q, K and V, so a single decorrelation matrix
/// covers the common input of all three.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub qkv: DecorrelatedLinear,
    pub proj: DecorrelatedLinear,
    heads: usize,
    cache: Option<AttnCache>,
}

#[derive(Debug, Clone, PartialEq)]
struct AttnCache {
    tokens: usize,
    qkv: Array2<f64>,
    /// Attention weights, indexed `[sequence * heads + head]`.
    weights: Vec<Array2<f64>>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(DbpError::Config(format!(
                "embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: DecorrelatedLinear::new(dim, 3 * dim, rng),
            proj: DecorrelatedLinear::new(dim, dim, rng),
            heads,
            cache: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.proj.out_dim()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Attention weights of the last forward pass for one sequence and head.
    pub fn attention_weights(&self, sequence: usize, head: usize) -> Option<&Array2<f64>> {
        self.cache
            .as_ref()
            .and_then(|c| c.weights.get(sequence * self.heads + head))
    }

    /// `x` holds `rows / tokens` sequences of `tokens` rows each.
    pub fn forward(&mut self, x: ArrayView2<'_, f64>, tokens: usize) -> Result<Array2<f64>> {
        let dim = self.dim();
        if tokens == 0 || !x.nrows().is_multiple_of(tokens) {
            return Err(DbpError::Shape(format!(
                "{} rows cannot be split into sequences of {tokens} tokens",
                x.nrows()
            )));
        }
        let seqs = x.nrows() / tokens;
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let qkv = self.qkv.forward(x)?;
        let mut context = Array2::zeros((x.nrows(), dim));
        let mut weights = Vec::with_capacity(seqs * self.heads);
        for n in 0..seqs {
            let rows = n * tokens..(n + 1) * tokens;
            for h in 0..self.heads {
                let c0 = h * head_dim;
                let q = qkv.slice(s![rows.clone(), c0..c0 + head_dim]);
                let k = qkv.slice(s![rows.clone(), dim + c0..dim + c0 + head_dim]);
                let v = qkv.slice(s![rows.clone(), 2 * dim + c0..2 * dim + c0 + head_dim]);
                let mut scores = q.dot(&k.t());
                scores *= scale;
                softmax_rows_inplace(&mut scores);
                let a = scores;
                context
                    .slice_mut(s![rows.clone(), c0..c0 + head_dim])
                    .assign(&a.dot(&v));
                weights.push(a);
            }
        }
        let out = self.proj.forward(context.view())?;
        self.cache = Some(AttnCache {
            tokens,
            qkv,
            weights,
        });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let grad_context = self.proj.backward(grad_out)?;
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| DbpError::State("attention backward called before forward".into()))?;
        let dim = self.dim();
        let tokens = cache.tokens;
        let seqs = cache.qkv.nrows() / tokens;
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut grad_qkv = Array2::zeros(cache.qkv.raw_dim());
        for n in 0..seqs {
            let rows = n * tokens..(n + 1) * tokens;
            for h in 0..self.heads {
                let c0 = h * head_dim;
                let (qc, kc, vc) = (c0, dim + c0, 2 * dim + c0);
                let q = cache.qkv.slice(s![rows.clone(), qc..qc + head_dim]);
                let k = cache.qkv.slice(s![rows.clone(), kc..kc + head_dim]);
                let v = cache.qkv.slice(s![rows.clone(), vc..vc + head_dim]);
                let a = &cache.weights[n * self.heads + h];
                let d_ctx = grad_context.slice(s![rows.clone(), c0..c0 + head_dim]);

                let d_a = d_ctx.dot(&v.t());
                let d_v = a.t().dot(&d_ctx);
                let mut d_scores = softmax_backward(a.view(), d_a.view());
                d_scores *= scale;
                let d_q = d_scores.dot(&k);
                let d_k = d_scores.t().dot(&q);

                grad_qkv.slice_mut(s![rows.clone(), qc..qc + head_dim]).assign(&d_q);
                grad_qkv.slice_mut(s![rows.clone(), kc..kc + head_dim]).assign(&d_k);
                grad_qkv.slice_mut(s![rows.clone(), vc..vc + head_dim]).assign(&d_v);
            }
        }
        self.qkv.backward(grad_qkv.view())
    }
}

impl Parameters for MultiHeadAttention {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        self.qkv.collect_params(&join(prefix, "qkv"), out);
        self.proj.collect_params(&join(prefix, "proj"), out);
    }
}
