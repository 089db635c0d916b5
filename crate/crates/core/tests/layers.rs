mod common;

use common::{near_identity, randn, rng};
use dbp_core::decorr::DecorrelationMatrix;
use dbp_core::nn::{gelu, BlockSite, DecorrelatedLinear, EncoderBlock, LayerNorm, MultiHeadAttention, LAYER_NORM_EPS};
use ndarray::{Array1, Array2};

fn affine_loops(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>, r: Option<&Array2<f64>>) -> Array2<f64> {
    let (n, i) = x.dim();
    let z = match r {
        Some(r) => {
            let mut z = Array2::zeros((n, i));
            for s in 0..n {
                for a in 0..i {
                    z[[s, a]] = (0..i).map(|c| r[[a, c]] * x[[s, c]]).sum();
                }
            }
            z
        }
        None => x.clone(),
    };
    let mut out = Array2::zeros((n, w.nrows()));
    for s in 0..n {
        for o in 0..w.nrows() {
            out[[s, o]] = b[o] + (0..i).map(|c| w[[o, c]] * z[[s, c]]).sum::<f64>();
        }
    }
    out
}

fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn linear_matches_loop_oracle() {
    let mut r = rng(1);
    let w = randn(4, 8, &mut r);
    let b = randn(1, 4, &mut r).into_shape_with_order(4).unwrap();
    let x = randn(16, 8, &mut r);
    let mut layer = DecorrelatedLinear::from_parts(w.clone(), b.clone());
    assert!(max_diff(&layer.forward(x.view()).unwrap(), &affine_loops(&x, &w, &b, None)) <= 1e-10);

    let rm = near_identity(8, 0.3, &mut r);
    layer
        .set_decorrelation(DecorrelationMatrix::from_values("s", rm.clone()).unwrap())
        .unwrap();
    let out = layer.forward(x.view()).unwrap();
    assert!(max_diff(&out, &affine_loops(&x, &w, &b, Some(&rm))) <= 1e-10);
    let mut fused = layer.clone();
    fused.fuse().unwrap();
    let f = fused.forward(x.view()).unwrap();
    let scale = out.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(max_diff(&out, &f) <= 1e-5 * scale);
}

/// Scaled dot-product attention per sequence and head, with explicit loops.
fn attention_loops(attn: &MultiHeadAttention, x: &Array2<f64>, tokens: usize) -> Array2<f64> {
    let dim = attn.dim();
    let heads = attn.heads();
    let hd = dim / heads;
    let qkv = affine_loops(
        x,
        &attn.qkv.weight.value,
        &attn.qkv.bias.value,
        attn.qkv.decorr().map(|d| d.values()),
    );
    let mut context = Array2::zeros((x.nrows(), dim));
    for s in 0..x.nrows() / tokens {
        for h in 0..heads {
            for t in 0..tokens {
                let row = s * tokens + t;
                let logits: Vec<f64> = (0..tokens)
                    .map(|u| {
                        let col = s * tokens + u;
                        (0..hd)
                            .map(|e| qkv[[row, h * hd + e]] * qkv[[col, dim + h * hd + e]])
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let total: f64 = exps.iter().sum();
                for e in 0..hd {
                    context[[row, h * hd + e]] = (0..tokens)
                        .map(|u| exps[u] / total * qkv[[s * tokens + u, 2 * dim + h * hd + e]])
                        .sum();
                }
            }
        }
    }
    affine_loops(&context, &attn.proj.weight.value, &attn.proj.bias.value, attn.proj.decorr().map(|d| d.values()))
}

#[test]
fn attention_matches_per_head_loops() {
    let mut r = rng(2);
    let (dim, heads, tokens) = (16, 4, 5);
    let mut attn = MultiHeadAttention::new(dim, heads, &mut r).unwrap();
    attn.qkv.bias.value = randn(1, 3 * dim, &mut r).into_shape_with_order(3 * dim).unwrap() * 0.1;
    attn.qkv
        .set_decorrelation(DecorrelationMatrix::from_values("qkv", near_identity(dim, 0.2, &mut r)).unwrap())
        .unwrap();
    let x = randn(3 * tokens, dim, &mut r);
    let out = attn.forward(x.view(), tokens).unwrap();
    assert!(max_diff(&out, &attention_loops(&attn, &x, tokens)) <= 1e-8);
}

fn layer_norm_loops(ln: &LayerNorm, x: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) / (var + LAYER_NORM_EPS).sqrt() * ln.gamma.value[j] + ln.beta.value[j];
        }
    }
    out
}

#[test]
fn block_is_two_pre_norm_residual_branches() {
    let mut r = rng(3);
    let (dim, heads, hidden, tokens) = (16, 4, 32, 5);
    let mut block = EncoderBlock::new(dim, heads, hidden, &mut r).unwrap();
    for site in BlockSite::for_mode(false) {
        let l = block.linear_mut(*site);
        let m = near_identity(l.in_dim(), 0.1, &mut r);
        l.set_decorrelation(DecorrelationMatrix::from_values(site.path(), m).unwrap()).unwrap();
    }
    let x = randn(2 * tokens, dim, &mut r);
    let out = block.forward(x.view(), tokens).unwrap();

    let h = &x + &attention_loops(&block.attn, &layer_norm_loops(&block.norm1, &x), tokens);
    let pre = affine_loops(
        &layer_norm_loops(&block.norm2, &h),
        &block.fc1.weight.value,
        &block.fc1.bias.value,
        block.fc1.decorr().map(|d| d.values()),
    );
    let mlp = affine_loops(&pre.mapv(gelu), &block.fc2.weight.value, &block.fc2.bias.value, None);
    assert!(max_diff(&out, &(&h + &mlp)) <= 1e-9);
}
