use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::activation::gelu_with_derivative;
use super::{join, DecorrelatedLinear, LayerNorm, MultiHeadAttention, ParamView, Parameters};
use crate::error::{DbpError, Result};

/// Linear layers inside a block that can carry a decorrelation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockSite {
    /// Shared Q/K/V projection, fed by the first layer norm.
    Qkv,
    /// First MLP linear, fed by the second layer norm.
    Fc1,
    /// Attention output projection (per-linear mode only).
    Proj,
    /// Second MLP linear (per-linear mode only).
    Fc2,
}

impl BlockSite {
    pub fn path(self) -> &'static str {
        match self {
            BlockSite::Qkv => "attn.qkv",
            BlockSite::Fc1 => "mlp.fc1",
            BlockSite::Proj => "attn.proj",
            BlockSite::Fc2 => "mlp.fc2",
        }
    }

    pub fn for_mode(per_linear: bool) -> &'static [BlockSite] {
        if per_linear {
            &[BlockSite::Qkv, BlockSite::Proj, BlockSite::Fc1, BlockSite::Fc2]
        } else {
            &[BlockSite::Qkv, BlockSite::Fc1]
        }
    }
}

/// Pre-norm transformer block:
/// `h = x + attn(ln1(x))`, `out = h + fc2(gelu(fc1(ln2(h))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: DecorrelatedLinear,
    pub fc2: DecorrelatedLinear,
    /// GELU slope at the fc1 output of the last forward pass.
    hidden: Option<Array2<f64>>,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let attn = MultiHeadAttention::new(dim, heads, rng)?;
        let fc1 = DecorrelatedLinear::new(dim, mlp_hidden, rng);
        let fc2 = DecorrelatedLinear::new(mlp_hidden, dim, rng);
        Ok(Self {
            norm1: LayerNorm::new(dim),
            attn,
            norm2: LayerNorm::new(dim),
            fc1,
            fc2,
            hidden: None,
        })
    }

    pub fn linear_mut(&mut self, site: BlockSite) -> &mut DecorrelatedLinear {
        match site {
            BlockSite::Qkv => &mut self.attn.qkv,
            BlockSite::Proj => &mut self.attn.proj,
            BlockSite::Fc1 => &mut self.fc1,
            BlockSite::Fc2 => &mut self.fc2,
        }
    }

    pub fn linear(&self, site: BlockSite) -> &DecorrelatedLinear {
        match site {
            BlockSite::Qkv => &self.attn.qkv,
            BlockSite::Proj => &self.attn.proj,
            BlockSite::Fc1 => &self.fc1,
            BlockSite::Fc2 => &self.fc2,
        }
    }

    pub fn forward(&mut self, x: ArrayView2<'_, f64>, tokens: usize) -> Result<Array2<f64>> {
        let normed = self.norm1.forward(x)?;
        let mut h = self.attn.forward(normed.view(), tokens)?;
        h += &x;
        let normed = self.norm2.forward(h.view())?;
        let pre = self.fc1.forward(normed.view())?;
        let (act, slope) = gelu_with_derivative(pre.view());
        self.hidden = Some(slope);
        let mut out = self.fc2.forward(act.view())?;
        out += &h;
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let slope = self
            .hidden
            .as_ref()
            .ok_or_else(|| DbpError::State("block backward called before forward".into()))?;
        let g_act = self.fc2.backward(grad_out)?;
        let g_pre = g_act * slope;
        let g_norm2 = self.fc1.backward(g_pre.view())?;
        let mut g_h = self.norm2.backward(g_norm2.view())?;
        g_h += &grad_out;
        let g_norm1 = self.attn.backward(g_h.view())?;
        let mut g_x = self.norm1.backward(g_norm1.view())?;
        g_x += &g_h;
        Ok(g_x)
    }

    /// Folds every decorrelation matrix in the block into its weight.
    pub fn fuse(&mut self) -> Result<()> {
        for site in BlockSite::for_mode(true) {
            self.linear_mut(*site).fuse()?;
        }
        Ok(())
    }
}

impl Parameters for EncoderBlock {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        self.norm1.collect_params(&join(prefix, "norm1"), out);
        self.attn.collect_params(&join(prefix, "attn"), out);
        self.norm2.collect_params(&join(prefix, "norm2"), out);
        self.fc1.collect_params(&join(prefix, "mlp.fc1"), out);
        self.fc2.collect_params(&join(prefix, "mlp.fc2"), out);
    }
}
