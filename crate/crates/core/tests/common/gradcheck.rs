//! Finite-difference checks of every backward pass. Each function returns the
//! worst relative error it saw.

use dbp_core::decorr::DecorrelationMatrix;
use dbp_core::mae::{mae_loss, mae_loss_grad, MaeConfig, MaeModel, MaskPlan};
use dbp_core::nn::{
    gelu, gelu_backward, softmax_backward, softmax_rows, DecorrelatedLinear, LayerNorm, MultiHeadAttention,
    Parameters,
};
use ndarray::{Array1, Array2, Array3};
use rand::seq::index::sample;
use rand::Rng;

use super::{central_diff, max_rel_err, near_identity, randn, rng, weighted_sum};

pub const H: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;

fn reshape(v: &[f64], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), v.to_vec()).unwrap()
}

pub fn linear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, i, o) = (6, 5, 4);
    let mut layer = DecorrelatedLinear::from_parts(randn(o, i, &mut r), randn(1, o, &mut r).into_shape_with_order(o).unwrap());
    layer
        .set_decorrelation(DecorrelationMatrix::from_values("s", near_identity(i, 0.3, &mut r)).unwrap())
        .unwrap();
    let x = randn(n, i, &mut r);
    let g = randn(n, o, &mut r);
    layer.forward(x.view()).unwrap();
    let grads = layer.gradients(g.view()).unwrap();

    let probe = layer.clone();
    let mut xs = x.clone().into_raw_vec_and_offset().0;
    let coords: Vec<usize> = (0..xs.len()).collect();
    let num_x = central_diff(&mut xs, &coords, H, |v| {
        let mut l = probe.clone();
        weighted_sum(l.forward(reshape(v, n, i).view()).unwrap().view(), g.view())
    });
    let mut ws = layer.weight.value.clone().into_raw_vec_and_offset().0;
    let coords: Vec<usize> = (0..ws.len()).collect();
    let num_w = central_diff(&mut ws, &coords, H, |v| {
        let mut l = probe.clone();
        l.weight.value = reshape(v, o, i);
        weighted_sum(l.forward(x.view()).unwrap().view(), g.view())
    });
    let mut bs = layer.bias.value.to_vec();
    let coords: Vec<usize> = (0..o).collect();
    let num_b = central_diff(&mut bs, &coords, H, |v| {
        let mut l = probe.clone();
        l.bias.value = Array1::from(v.to_vec());
        weighted_sum(l.forward(x.view()).unwrap().view(), g.view())
    });
    [
        max_rel_err(grads.grad_x.as_slice().unwrap(), &num_x, FLOOR),
        max_rel_err(grads.grad_w.as_slice().unwrap(), &num_w, FLOOR),
        max_rel_err(grads.grad_b.as_slice().unwrap(), &num_b, FLOOR),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

pub fn layer_norm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d) = (5, 7);
    let mut ln = LayerNorm::new(d);
    ln.gamma.value = Array1::from_shape_simple_fn(d, || 1.0 + 0.5 * r.random::<f64>());
    ln.beta.value = Array1::from_shape_simple_fn(d, || r.random::<f64>() - 0.5);
    let x = randn(n, d, &mut r) * 2.0;
    let g = randn(n, d, &mut r);
    let probe = ln.clone();
    ln.forward(x.view()).unwrap();
    let gx = ln.backward(g.view()).unwrap();

    let mut xs = x.clone().into_raw_vec_and_offset().0;
    let coords: Vec<usize> = (0..xs.len()).collect();
    let num_x = central_diff(&mut xs, &coords, H, |v| {
        let mut l = probe.clone();
        weighted_sum(l.forward(reshape(v, n, d).view()).unwrap().view(), g.view())
    });
    let mut gs = probe.gamma.value.to_vec();
    let coords: Vec<usize> = (0..d).collect();
    let num_gamma = central_diff(&mut gs, &coords, H, |v| {
        let mut l = probe.clone();
        l.gamma.value = Array1::from(v.to_vec());
        weighted_sum(l.forward(x.view()).unwrap().view(), g.view())
    });
    let mut bs = probe.beta.value.to_vec();
    let num_beta = central_diff(&mut bs, &coords, H, |v| {
        let mut l = probe.clone();
        l.beta.value = Array1::from(v.to_vec());
        weighted_sum(l.forward(x.view()).unwrap().view(), g.view())
    });
    [
        max_rel_err(gx.as_slice().unwrap(), &num_x, FLOOR),
        max_rel_err(ln.gamma.grad.as_slice().unwrap(), &num_gamma, FLOOR),
        max_rel_err(ln.beta.grad.as_slice().unwrap(), &num_beta, FLOOR),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

pub fn gelu_activation(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d) = (4, 8);
    let x = randn(n, d, &mut r) * 2.0;
    let g = randn(n, d, &mut r);
    let analytic = gelu_backward(x.view(), g.view());
    let mut xs = x.into_raw_vec_and_offset().0;
    let coords: Vec<usize> = (0..xs.len()).collect();
    let numeric = central_diff(&mut xs, &coords, H, |v| {
        v.iter().zip(g.iter()).map(|(&a, &w)| gelu(a) * w).sum()
    });
    max_rel_err(analytic.as_slice().unwrap(), &numeric, FLOOR)
}

pub fn softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d) = (4, 9);
    let x = randn(n, d, &mut r) * 2.0;
    let g = randn(n, d, &mut r);
    let y = softmax_rows(x.view());
    let analytic = softmax_backward(y.view(), g.view());
    let mut xs = x.into_raw_vec_and_offset().0;
    let coords: Vec<usize> = (0..xs.len()).collect();
    let numeric = central_diff(&mut xs, &coords, H, |v| {
        weighted_sum(softmax_rows(reshape(v, n, d).view()).view(), g.view())
    });
    max_rel_err(analytic.as_slice().unwrap(), &numeric, FLOOR)
}

pub fn attention(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (dim, heads, tokens, seqs) = (8, 2, 3, 2);
    let n = tokens * seqs;
    let mut attn = MultiHeadAttention::new(dim, heads, &mut r).unwrap();
    attn.qkv
        .set_decorrelation(DecorrelationMatrix::from_values("qkv", near_identity(dim, 0.2, &mut r)).unwrap())
        .unwrap();
    attn.qkv.bias.value = Array1::from_shape_simple_fn(3 * dim, || 0.1 * r.random::<f64>());
    let x = randn(n, dim, &mut r);
    let g = randn(n, dim, &mut r);
    let probe = attn.clone();
    attn.forward(x.view(), tokens).unwrap();
    let gx = attn.backward(g.view()).unwrap();

    let mut xs = x.clone().into_raw_vec_and_offset().0;
    let coords: Vec<usize> = (0..xs.len()).collect();
    let num_x = central_diff(&mut xs, &coords, H, |v| {
        let mut a = probe.clone();
        weighted_sum(a.forward(reshape(v, n, dim).view(), tokens).unwrap().view(), g.view())
    });
    let mut qkv = probe.qkv.weight.value.clone().into_raw_vec_and_offset().0;
    let coords: Vec<usize> = (0..qkv.len()).step_by(3).collect();
    let num_qkv = central_diff(&mut qkv, &coords, H, |v| {
        let mut a = probe.clone();
        a.qkv.weight.value = reshape(v, 3 * dim, dim);
        weighted_sum(a.forward(x.view(), tokens).unwrap().view(), g.view())
    });
    let ana_qkv: Vec<f64> = coords.iter().map(|&i| attn.qkv.weight.grad.as_slice().unwrap()[i]).collect();
    let mut proj = probe.proj.weight.value.clone().into_raw_vec_and_offset().0;
    let coords: Vec<usize> = (0..proj.len()).collect();
    let num_proj = central_diff(&mut proj, &coords, H, |v| {
        let mut a = probe.clone();
        a.proj.weight.value = reshape(v, dim, dim);
        weighted_sum(a.forward(x.view(), tokens).unwrap().view(), g.view())
    });
    [
        max_rel_err(gx.as_slice().unwrap(), &num_x, FLOOR),
        max_rel_err(&ana_qkv, &num_qkv, FLOOR),
        max_rel_err(attn.proj.weight.grad.as_slice().unwrap(), &num_proj, FLOOR),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn model_loss(model: &mut MaeModel, patches: &Array3<f64>, target: &Array3<f64>, plans: &[MaskPlan]) -> f64 {
    let recon = model.forward(patches.view(), plans).unwrap();
    mae_loss(recon.view(), target.view(), plans, model.config().loss_on_masked_only).unwrap()
}

/// Gradient of the full reconstruction loss for `count` random scalar
/// parameters of a desk-scale model with non-identity decorrelation matrices.
pub fn end_to_end(seed: u64, count: usize) -> f64 {
    let mut r = rng(seed);
    let config = MaeConfig::desk();
    let mut model = MaeModel::new(config.clone(), &mut r).unwrap();
    let sites = config.decorr_sites(dbp_core::decorr::Scope::FullModel, false);
    model.enable_decorrelation(&sites).unwrap();
    for (_, l) in model.linears_mut() {
        if let Some(d) = l.decorr() {
            let values = near_identity(d.dim(), 0.05, &mut r);
            let id = d.site_id().to_string();
            l.set_decorrelation(DecorrelationMatrix::from_values(id, values).unwrap()).unwrap();
        }
    }
    let images: Vec<_> = (0..2)
        .map(|_| {
            Array3::from_shape_simple_fn((config.channels, config.image_size, config.image_size), || {
                r.sample::<f64, _>(rand_distr::StandardNormal)
            })
        })
        .collect();
    let patches = model.patchify_batch(&images).unwrap();
    let target = patches.clone();
    let plans: Vec<MaskPlan> = (0..2)
        .map(|i| MaskPlan::generate(config.num_patches(), config.mask_ratio, seed * 10 + i).unwrap())
        .collect();

    model.zero_grad();
    let recon = model.forward(patches.view(), &plans).unwrap();
    let grad = mae_loss_grad(recon.view(), target.view(), &plans, config.loss_on_masked_only).unwrap();
    model.backward(grad.view()).unwrap();

    let sizes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let picks = sample(&mut r, total, count).into_vec();
    let locate = |mut flat: usize| {
        for (pi, &s) in sizes.iter().enumerate() {
            if flat < s {
                return (pi, flat);
            }
            flat -= s;
        }
        unreachable!()
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for flat in picks {
        let (pi, ei) = locate(flat);
        analytic.push(model.params()[pi].grad[ei]);
        let orig = model.params()[pi].value[ei];
        let mut eval = |v: f64| {
            model.params()[pi].value[ei] = v;
            model_loss(&mut model, &patches, &target, &plans)
        };
        let up = eval(orig + H);
        let down = eval(orig - H);
        eval(orig);
        numeric.push((up - down) / (2.0 * H));
    }
    max_rel_err(&analytic, &numeric, FLOOR)
}
