//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use tecswin::swin::{relative_position_index, AttentionConfig, WindowAttention};
use tecswin::tensor::Tensor;

pub fn cfg(heads: usize, head_dim: usize, window: usize, bias: bool) -> AttentionConfig {
    AttentionConfig {
        num_heads: heads,
        head_dim,
        window,
        mlp_ratio_self: 4,
        mlp_ratio_cross: 2,
        use_relative_bias: bias,
    }
}

pub fn affine(x: &[f32], w: &Tensor, b: Option<&Tensor>, col: usize) -> f64 {
    let out = w.dim(1);
    let mut acc = b.map_or(0.0, |b| b.data()[col] as f64);
    for (i, &xi) in x.iter().enumerate() {
        acc += xi as f64 * w.data()[i * out + col] as f64;
    }
    acc
}

/// Dense softmax attention over `[window keys | context keys]`, one query at
/// a time, straight from the weight matrices.
pub fn dense_reference(
    attn: &WindowAttention,
    x: &Tensor,
    batch: usize,
    ctx: Option<&Tensor>,
    mask: Option<&Tensor>,
) -> Vec<f64> {
    let (n, t, c) = (x.dim(0), x.dim(1), x.dim(2));
    let heads = attn.cfg.num_heads;
    let hd = attn.cfg.head_dim;
    let nw = n / batch;
    let rel = relative_position_index(attn.cfg.window);
    let row = |m: &Tensor, i: usize, width: usize| m.data()[i * width..(i + 1) * width].to_vec();
    let mut out = vec![0.0f64; n * t * c];
    for win in 0..n {
        let b = win / nw;
        let tokens: Vec<Vec<f32>> = (0..t).map(|i| row(x, win * t + i, c)).collect();
        let ctx_tokens: Vec<Vec<f32>> = match ctx {
            Some(ctx) => {
                let (l, d) = (ctx.dim(1), ctx.dim(2));
                (0..l).map(|j| row(ctx, b * l + j, d)).collect()
            }
            None => Vec::new(),
        };
        let qkv = |tok: &[f32], part: usize, h: usize, d: usize| {
            affine(tok, &attn.qkv.weight, attn.qkv.bias.as_ref(), part * c + h * hd + d)
        };
        let ckv = |tok: &[f32], part: usize, h: usize, d: usize| {
            affine(tok, &attn.ctx_kv.weight, attn.ctx_kv.bias.as_ref(), part * c + h * hd + d)
        };
        let mut head_out = vec![0.0f64; t * c];
        for h in 0..heads {
            for i in 0..t {
                let q: Vec<f64> = (0..hd).map(|d| qkv(&tokens[i], 0, h, d) / (hd as f64).sqrt()).collect();
                let mut logits = Vec::new();
                let mut values = Vec::new();
                for j in 0..t {
                    let mut l: f64 = (0..hd).map(|d| q[d] * qkv(&tokens[j], 1, h, d)).sum();
                    if let Some(table) = &attn.relative_bias {
                        l += table.data()[rel[i * t + j] * heads + h] as f64;
                    }
                    if let Some(m) = mask {
                        l += m.data()[((win % nw) * t + i) * t + j] as f64;
                    }
                    logits.push(l);
                    values.push((0..hd).map(|d| qkv(&tokens[j], 2, h, d)).collect::<Vec<_>>());
                }
                for ct in &ctx_tokens {
                    logits.push((0..hd).map(|d| q[d] * ckv(ct, 0, h, d)).sum());
                    values.push((0..hd).map(|d| ckv(ct, 1, h, d)).collect());
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for (l, v) in logits.iter().zip(&values) {
                    let a = (l - mx).exp() / z;
                    for d in 0..hd {
                        head_out[i * c + h * hd + d] += a * v[d];
                    }
                }
            }
        }
        for i in 0..t {
            let o: Vec<f32> = head_out[i * c..(i + 1) * c].iter().map(|&v| v as f32).collect();
            for k in 0..c {
                out[(win * t + i) * c + k] = affine(&o, &attn.proj.weight, attn.proj.bias.as_ref(), k);
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}
