//! Masked-autoencoder vision transformer at desk scale.
//!
//! Images are split into patches; a random subset is hidden and the encoder sees
//! only the visible patches (plus fixed positional embeddings). A light decoder
//! receives the encoded tokens together with a learned mask token at every
//! hidden position and predicts all patches in pixel space.

mod loss;
mod mask;
mod patch;

pub use loss::{mae_loss, mae_loss_grad, normalize_patch_targets};
pub use mask::{masked_count, MaskPlan};
pub use patch::{patchify, sincos_position_embedding, unpatchify};

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis, Ix1};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::decorr::{off_diagonal_covariance, decorrelation_loss, Scope};
use crate::error::{DbpError, Result};
use crate::nn::{join, BlockSite, DecorrelatedLinear, EncoderBlock, LayerNorm, Param, ParamView, Parameters};

/// Architecture and masking hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_embed_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
    pub loss_on_masked_only: bool,
    /// Standardize each target patch before the squared error.
    pub norm_pix_loss: bool,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MaeConfig {
    /// Small configuration that trains on a single CPU core.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 3,
            heads: 4,
            mlp_ratio: 4,
            decoder_embed_dim: 32,
            decoder_depth: 2,
            decoder_heads: 1,
            mask_ratio: 0.75,
            loss_on_masked_only: true,
            norm_pix_loss: false,
        }
    }

    /// ViT-Base MAE shape (224px images, 16px patches, 12 blocks of width 768).
    pub fn vit_base() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            decoder_embed_dim: 512,
            decoder_depth: 2,
            decoder_heads: 16,
            mask_ratio: 0.75,
            loss_on_masked_only: true,
            norm_pix_loss: false,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn visible_count(&self) -> usize {
        self.num_patches() - masked_count(self.num_patches(), self.mask_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DbpError::Config(msg));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "mae.image_size {} is not divisible by mae.patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.depth == 0 || self.decoder_depth == 0 || self.mlp_ratio == 0 {
            return fail("mae.channels, depth, decoder_depth and mlp_ratio must be positive".into());
        }
        for (name, dim, heads) in [
            ("mae.embed_dim", self.embed_dim, self.heads),
            ("mae.decoder_embed_dim", self.decoder_embed_dim, self.decoder_heads),
        ] {
            if dim == 0 || dim % 4 != 0 {
                return fail(format!("{name} must be a positive multiple of 4, got {dim}"));
            }
            if heads == 0 || dim % heads != 0 {
                return fail(format!("{name} {dim} is not divisible by {heads} heads"));
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return fail(format!("mae.mask_ratio must be in [0, 1), got {}", self.mask_ratio));
        }
        if self.loss_on_masked_only && masked_count(self.num_patches(), self.mask_ratio) == 0 {
            return fail("mae.mask_ratio masks no patch but the loss is restricted to masked patches".into());
        }
        Ok(())
    }

    /// Identifiers of the linear layers whose inputs are decorrelated under `scope`.
    ///
    /// The encoder contributes its patch embedding plus two (or, in per-linear
    /// mode, four) linears per block; the decoder contributes the same per-block
    /// linears.
    pub fn decorr_sites(&self, scope: Scope, per_linear: bool) -> Vec<String> {
        let mut sites = Vec::new();
        if scope.includes_encoder() {
            sites.push("encoder.patch_embed".to_string());
            for i in 0..self.depth {
                for site in BlockSite::for_mode(per_linear) {
                    sites.push(format!("encoder.blocks.{i}.{}", site.path()));
                }
            }
        }
        if scope.includes_decoder() {
            for i in 0..self.decoder_depth {
                for site in BlockSite::for_mode(per_linear) {
                    sites.push(format!("decoder.blocks.{i}.{}", site.path()));
                }
            }
        }
        sites
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ForwardCache {
    plans: Vec<MaskPlan>,
    encoder_out: Array2<f64>,
}

/// Patch embedding, encoder blocks, decoder and prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeModel {
    config: MaeConfig,
    pub patch_embed: DecorrelatedLinear,
    pub encoder_blocks: Vec<EncoderBlock>,
    pub encoder_norm: LayerNorm,
    pub decoder_embed: DecorrelatedLinear,
    pub mask_token: Param<Ix1>,
    pub decoder_blocks: Vec<EncoderBlock>,
    pub decoder_norm: LayerNorm,
    pub head: DecorrelatedLinear,
    encoder_pos: Array2<f64>,
    decoder_pos: Array2<f64>,
    cache: Option<ForwardCache>,
}

impl MaeModel {
    /// Randomly initialised model without decorrelation matrices.
    pub fn new<R: Rng + ?Sized>(config: MaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let dd = config.decoder_embed_dim;
        let patch_embed = DecorrelatedLinear::new(config.patch_dim(), d, rng);
        let encoder_blocks = (0..config.depth)
            .map(|_| EncoderBlock::new(d, config.heads, d * config.mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder_embed = DecorrelatedLinear::new(d, dd, rng);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mask_token = Param::new(Array1::from_shape_simple_fn(dd, || normal.sample(rng)), false);
        let decoder_blocks = (0..config.decoder_depth)
            .map(|_| EncoderBlock::new(dd, config.decoder_heads, dd * config.mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = DecorrelatedLinear::new(dd, config.patch_dim(), rng);
        let encoder_pos = sincos_position_embedding(d, config.grid())?;
        let decoder_pos = sincos_position_embedding(dd, config.grid())?;
        Ok(Self {
            config,
            patch_embed,
            encoder_blocks,
            encoder_norm: LayerNorm::new(d),
            decoder_embed,
            mask_token,
            decoder_blocks,
            decoder_norm: LayerNorm::new(dd),
            head,
            encoder_pos,
            decoder_pos,
            cache: None,
        })
    }

    pub fn config(&self) -> &MaeConfig {
        &self.config
    }

    /// Every linear layer with its path, in a fixed order.
    pub fn linears(&self) -> Vec<(String, &DecorrelatedLinear)> {
        let mut out = vec![("encoder.patch_embed".to_string(), &self.patch_embed)];
        for (prefix, blocks) in [("encoder", &self.encoder_blocks), ("decoder", &self.decoder_blocks)] {
            for (i, b) in blocks.iter().enumerate() {
                for site in BlockSite::for_mode(true) {
                    out.push((format!("{prefix}.blocks.{i}.{}", site.path()), b.linear(*site)));
                }
            }
            if prefix == "encoder" {
                out.push(("decoder.embed".to_string(), &self.decoder_embed));
            }
        }
        out.push(("decoder.head".to_string(), &self.head));
        out
    }

    /// Mutable counterpart of [`MaeModel::linears`].
    pub fn linears_mut(&mut self) -> Vec<(String, &mut DecorrelatedLinear)> {
        let mut out = vec![("encoder.patch_embed".to_string(), &mut self.patch_embed)];
        for (i, b) in self.encoder_blocks.iter_mut().enumerate() {
            push_block_linears(&mut out, &format!("encoder.blocks.{i}"), b);
        }
        out.push(("decoder.embed".to_string(), &mut self.decoder_embed));
        for (i, b) in self.decoder_blocks.iter_mut().enumerate() {
            push_block_linears(&mut out, &format!("decoder.blocks.{i}"), b);
        }
        out.push(("decoder.head".to_string(), &mut self.head));
        out
    }

    pub fn linear(&self, path: &str) -> Option<&DecorrelatedLinear> {
        self.linears().into_iter().find(|(p, _)| p == path).map(|(_, l)| l)
    }

    /// Attaches identity decorrelation matrices at the given site paths.
    pub fn enable_decorrelation(&mut self, sites: &[String]) -> Result<()> {
        let mut found = 0;
        for (path, linear) in self.linears_mut() {
            if sites.contains(&path) {
                linear.enable_decorrelation(path);
                found += 1;
            }
        }
        if found != sites.len() {
            return Err(DbpError::Config(format!(
                "unknown decorrelation site among {sites:?}"
            )));
        }
        Ok(())
    }

    /// Sites that currently own a decorrelation matrix.
    pub fn decorrelated_sites(&self) -> Vec<String> {
        self.linears()
            .into_iter()
            .filter(|(_, l)| l.decorr().is_some())
            .map(|(p, _)| p)
            .collect()
    }

    /// Folds every decorrelation matrix into its weight.
    pub fn fuse(&mut self) -> Result<()> {
        for (_, linear) in self.linears_mut() {
            linear.fuse()?;
        }
        Ok(())
    }

    /// Mean decorrelation loss over `sites`, measured on the inputs cached by the
    /// last forward pass. Sites without a matrix report their raw input correlation.
    pub fn mean_site_decorrelation_loss(&self, sites: &[String]) -> Result<Option<f64>> {
        let mut total = 0.0;
        let mut n = 0usize;
        for (path, linear) in self.linears() {
            if !sites.contains(&path) {
                continue;
            }
            let z = linear.cached_input().ok_or_else(|| {
                DbpError::State(format!("site `{path}` has no cached input"))
            })?;
            total += decorrelation_loss(&off_diagonal_covariance(z.view())?)?;
            n += 1;
        }
        Ok((n > 0).then(|| total / n as f64))
    }

    /// Encoder output from the last forward pass, rows = `batch * visible`.
    pub fn encoder_output(&self) -> Option<&Array2<f64>> {
        self.cache.as_ref().map(|c| &c.encoder_out)
    }

    /// Patchifies a batch of `B x C x H x W` images into `B x P x patch_dim`.
    pub fn patchify_batch(&self, images: &[ndarray::Array3<f64>]) -> Result<Array3<f64>> {
        let cfg = &self.config;
        let mut out = Array3::zeros((images.len(), cfg.num_patches(), cfg.patch_dim()));
        for (b, img) in images.iter().enumerate() {
            if img.dim() != (cfg.channels, cfg.image_size, cfg.image_size) {
                return Err(DbpError::Shape(format!(
                    "image {:?} does not match config {}x{}x{}",
                    img.dim(),
                    cfg.channels,
                    cfg.image_size,
                    cfg.image_size
                )));
            }
            out.index_axis_mut(Axis(0), b)
                .assign(&patchify(img.view(), cfg.patch_size)?);
        }
        Ok(out)
    }

    /// Reconstructs every patch of every image from its visible patches.
    pub fn forward(&mut self, patches: ArrayView3<'_, f64>, plans: &[MaskPlan]) -> Result<Array3<f64>> {
        let cfg = &self.config;
        let (batch, p, pd) = patches.dim();
        if p != cfg.num_patches() || pd != cfg.patch_dim() || plans.len() != batch || batch == 0 {
            return Err(DbpError::Shape(format!(
                "expected (B, {}, {}) patches with one plan per image, got {:?} and {} plans",
                cfg.num_patches(),
                cfg.patch_dim(),
                patches.dim(),
                plans.len()
            )));
        }
        let visible = plans[0].visible_indices.len();
        if visible == 0 || plans.iter().any(|pl| pl.visible_indices.len() != visible || pl.patch_count() != p) {
            return Err(DbpError::Shape(
                "every plan in a batch must keep the same positive number of visible patches".into(),
            ));
        }

        let d = cfg.embed_dim;
        let dd = cfg.decoder_embed_dim;
        let mut tokens = Array2::zeros((batch * visible, pd));
        let mut pos = Array2::zeros((batch * visible, d));
        for (b, plan) in plans.iter().enumerate() {
            for (j, &idx) in plan.visible_indices.iter().enumerate() {
                tokens.row_mut(b * visible + j).assign(&patches.slice(ndarray::s![b, idx, ..]));
                pos.row_mut(b * visible + j).assign(&self.encoder_pos.row(idx));
            }
        }

        let mut h = self.patch_embed.forward(tokens.view())?;
        h += &pos;
        for block in &mut self.encoder_blocks {
            h = block.forward(h.view(), visible)?;
        }
        let encoded = self.encoder_norm.forward(h.view())?;

        let embedded = self.decoder_embed.forward(encoded.view())?;
        let mut full = Array2::zeros((batch * p, dd));
        for (b, plan) in plans.iter().enumerate() {
            for (j, &idx) in plan.visible_indices.iter().enumerate() {
                full.row_mut(b * p + idx).assign(&embedded.row(b * visible + j));
            }
            for &idx in &plan.masked_indices {
                full.row_mut(b * p + idx).assign(&self.mask_token.value);
            }
            let mut rows = full.slice_mut(ndarray::s![b * p..(b + 1) * p, ..]);
            rows += &self.decoder_pos;
        }
        for block in &mut self.decoder_blocks {
            full = block.forward(full.view(), p)?;
        }
        let normed = self.decoder_norm.forward(full.view())?;
        let out = self.head.forward(normed.view())?;

        self.cache = Some(ForwardCache {
            plans: plans.to_vec(),
            encoder_out: encoded,
        });
        Ok(out
            .into_shape_with_order((batch, p, pd))
            .expect("row-major output reshapes"))
    }

    /// Accumulates parameter gradients for `grad` = dLoss/dReconstruction.
    pub fn backward(&mut self, grad: ArrayView3<'_, f64>) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| DbpError::State("model backward called before forward".into()))?;
        let (batch, p, pd) = grad.dim();
        if batch != cache.plans.len() || p != self.config.num_patches() || pd != self.config.patch_dim() {
            return Err(DbpError::Shape(format!(
                "gradient {:?} does not match the last forward pass",
                grad.dim()
            )));
        }
        let visible = cache.plans[0].visible_indices.len();
        let grad2 = grad
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((batch * p, pd))
            .expect("contiguous gradient");

        let g = self.head.backward(grad2.view())?;
        let mut g = self.decoder_norm.backward(g.view())?;
        for block in self.decoder_blocks.iter_mut().rev() {
            g = block.backward(g.view())?;
        }
        let mut g_embedded = Array2::zeros((batch * visible, self.config.decoder_embed_dim));
        for (b, plan) in cache.plans.iter().enumerate() {
            for (j, &idx) in plan.visible_indices.iter().enumerate() {
                g_embedded.row_mut(b * visible + j).assign(&g.row(b * p + idx));
            }
            for &idx in &plan.masked_indices {
                self.mask_token.grad += &g.row(b * p + idx);
            }
        }
        let g = self.decoder_embed.backward(g_embedded.view())?;
        let mut g = self.encoder_norm.backward(g.view())?;
        for block in self.encoder_blocks.iter_mut().rev() {
            g = block.backward(g.view())?;
        }
        self.patch_embed.backward(g.view())?;
        self.cache = Some(cache);
        Ok(())
    }

    /// Drops cached activations of every layer.
    pub fn clear_caches(&mut self) {
        for (_, l) in self.linears_mut() {
            l.clear_cache();
        }
        self.cache = None;
    }
}

fn push_block_linears<'a>(
    out: &mut Vec<(String, &'a mut DecorrelatedLinear)>,
    prefix: &str,
    block: &'a mut EncoderBlock,
) {
    let EncoderBlock { attn, fc1, fc2, .. } = block;
    out.push((join(prefix, BlockSite::Qkv.path()), &mut attn.qkv));
    out.push((join(prefix, BlockSite::Proj.path()), &mut attn.proj));
    out.push((join(prefix, BlockSite::Fc1.path()), fc1));
    out.push((join(prefix, BlockSite::Fc2.path()), fc2));
}

impl Parameters for MaeModel {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        self.patch_embed.collect_params(&join(prefix, "encoder.patch_embed"), out);
        for (i, b) in self.encoder_blocks.iter_mut().enumerate() {
            b.collect_params(&join(prefix, &format!("encoder.blocks.{i}")), out);
        }
        self.encoder_norm.collect_params(&join(prefix, "encoder.norm"), out);
        self.decoder_embed.collect_params(&join(prefix, "decoder.embed"), out);
        out.push(self.mask_token.view(join(prefix, "decoder.mask_token")));
        for (i, b) in self.decoder_blocks.iter_mut().enumerate() {
            b.collect_params(&join(prefix, &format!("decoder.blocks.{i}")), out);
        }
        self.decoder_norm.collect_params(&join(prefix, "decoder.norm"), out);
        self.head.collect_params(&join(prefix, "decoder.head"), out);
    }
}
