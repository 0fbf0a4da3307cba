mod common;

use common::{affine, cfg, dense_reference, max_abs_diff};
use tecswin::swin::{shift_attention_mask, CrossAttention, ScaleShiftVariant, SwinBlock, WindowAttention};
use tecswin::tensor::{Rng, Tensor};

#[test]
fn window_attention_matches_dense_oracle() {
    let mut rng = Rng::new(11);
    let mut worst = 0.0f64;
    for case in 0..120 {
        let heads = 1 + rng.below(3);
        let hd = 2 + rng.below(3);
        let win = 1 + rng.below(3);
        let batch = 1 + rng.below(2);
        let nw = 1 + rng.below(3);
        let ctx_len = rng.below(4);
        let ctx_dim = 2 + rng.below(4);
        let c = heads * hd;
        let t = win * win;
        let a = WindowAttention::new(cfg(heads, hd, win, case % 2 == 0), ctx_dim, &mut rng);
        let x = Tensor::randn(&[batch * nw, t, c], 1.0, &mut rng);
        let ctx = Tensor::randn(&[batch, ctx_len, ctx_dim], 1.0, &mut rng);
        let mask = (case % 3 == 0).then(|| {
            let vals: Vec<f32> = (0..nw * t * t)
                .map(|_| if rng.bernoulli(0.3) { -100.0 } else { 0.0 })
                .collect();
            Tensor::from_vec(vals, &[nw, t, t]).unwrap()
        });
        let got = a.forward(&x, batch, Some(&ctx), mask.as_ref()).unwrap();
        let want = dense_reference(&a, &x, batch, Some(&ctx), mask.as_ref());
        let err = max_abs_diff(got.data(), &want);
        assert!(err < 1e-5, "case {case}: {err}");
        worst = worst.max(err);
    }
    assert!(worst < 1e-5);
}

#[test]
fn empty_context_is_plain_window_attention() {
    let mut rng = Rng::new(3);
    for _ in 0..20 {
        let a = WindowAttention::new(cfg(2, 4, 2, true), 6, &mut rng);
        let x = Tensor::randn(&[6, 4, 8], 1.0, &mut rng);
        let empty = Tensor::zeros(&[2, 0, 6]);
        let with_empty = a.forward(&x, 2, Some(&empty), None).unwrap();
        let plain = a.forward(&x, 2, None, None).unwrap();
        let err = max_abs_diff(with_empty.data(), &plain.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = Rng::new(5);
    let a = WindowAttention::new(cfg(2, 3, 3, true), 4, &mut rng);
    let x = Tensor::randn(&[4, 9, 6], 1.0, &mut rng);
    let ctx = Tensor::randn(&[2, 5, 4], 1.0, &mut rng);
    let w = a.forward_with_weights(&x, 2, Some(&ctx), None).unwrap().weights;
    assert_eq!(w.shape(), &[2, 2, 2, 9, 14]);
    for row in w.data().chunks(14) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn shifted_windows_never_attend_across_regions() {
    let (h, w, win, shift) = (8, 8, 4, 2);
    let mut rng = Rng::new(9);
    let a = WindowAttention::new(cfg(2, 4, win, true), 4, &mut rng);
    let x = Tensor::randn(&[1, h, w, 8], 1.0, &mut rng);
    let windows = x.cyclic_shift(-(shift as isize), -(shift as isize)).unwrap().window_partition(win).unwrap();
    let mask = shift_attention_mask(h, w, win, shift).unwrap();
    let ctx = Tensor::randn(&[1, 3, 4], 1.0, &mut rng);
    let weights = a.forward_with_weights(&windows, 1, Some(&ctx), Some(&mask)).unwrap().weights;

    // Region label of each pixel in the rolled frame: rows/cols are split
    // at h - win and h - shift.
    let region = |p: usize, n: usize| usize::from(p >= n - win) + usize::from(p >= n - shift);
    let t = win * win;
    let nwx = w / win;
    let mut probed = 0;
    let mut worst = 0.0f32;
    for wi in 0..(h / win) * nwx {
        let (wy, wx) = (wi / nwx, wi % nwx);
        let label = |k: usize| {
            let (y, x) = (wy * win + k / win, wx * win + k % win);
            region(y, h) * 3 + region(x, w)
        };
        for head in 0..2 {
            for i in 0..t {
                for j in 0..t {
                    if label(i) != label(j) {
                        let v = weights.data()[((wi * 2 + head) * t + i) * (t + 3) + j];
                        worst = worst.max(v);
                        probed += 1;
                    }
                }
            }
        }
    }
    assert!(probed > 0);
    assert!(worst < 1e-7, "{worst}");
}

#[test]
fn windows_are_independent_without_context() {
    let mut rng = Rng::new(21);
    let block = SwinBlock::new(cfg(2, 4, 4, true), 8, false, false, ScaleShiftVariant::default(), &mut rng);
    let x = Tensor::randn(&[1, 8, 8, 8], 1.0, &mut rng);
    let base = block.spatial_attention(&x, None).unwrap();
    let mut zeroed = x.to_vec();
    for y in 0..4 {
        for xx in 4..8 {
            for k in 0..8 {
                zeroed[(y * 8 + xx) * 8 + k] = 0.0;
            }
        }
    }
    let probe = block.spatial_attention(&Tensor::from_vec(zeroed, &[1, 8, 8, 8]).unwrap(), None).unwrap();
    for y in 0..8 {
        for xx in 0..8 {
            let inside = y < 4 && xx >= 4;
            let o = (y * 8 + xx) * 8;
            let changed = (0..8).any(|k| (base.data()[o + k] - probe.data()[o + k]).abs() > 1e-6);
            assert_eq!(changed, inside, "pixel ({y},{xx})");
        }
    }
}

#[test]
fn cross_attention_matches_dense_oracle() {
    let mut rng = Rng::new(17);
    for _ in 0..30 {
        let heads = 1 + rng.below(2);
        let hd = 2 + rng.below(3);
        let c = heads * hd;
        let d = 3 + rng.below(3);
        let (b, l, lc) = (1 + rng.below(2), 1 + rng.below(5), 1 + rng.below(4));
        let ca = CrossAttention::new(&cfg(heads, hd, 1, false), d, &mut rng);
        let x = Tensor::randn(&[b, l, c], 1.0, &mut rng);
        let ctx = Tensor::randn(&[b, lc, d], 1.0, &mut rng);
        let got = ca.attend(&x, &ctx).unwrap();
        let mut want = vec![0.0f64; b * l * c];
        for bi in 0..b {
            let ctx_row = |j: usize| ctx.data()[(bi * lc + j) * d..(bi * lc + j + 1) * d].to_vec();
            for i in 0..l {
                let xr = &x.data()[(bi * l + i) * c..(bi * l + i + 1) * c];
                let mut o = vec![0.0f64; c];
                for h in 0..heads {
                    let q: Vec<f64> = (0..hd)
                        .map(|k| affine(xr, &ca.q.weight, ca.q.bias.as_ref(), h * hd + k) / (hd as f64).sqrt())
                        .collect();
                    let logits: Vec<f64> = (0..lc)
                        .map(|j| {
                            let cr = ctx_row(j);
                            (0..hd).map(|k| q[k] * affine(&cr, &ca.kv.weight, ca.kv.bias.as_ref(), h * hd + k)).sum()
                        })
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
                    for (j, lg) in logits.iter().enumerate() {
                        let cr = ctx_row(j);
                        for k in 0..hd {
                            o[h * hd + k] +=
                                (lg - mx).exp() / z * affine(&cr, &ca.kv.weight, ca.kv.bias.as_ref(), c + h * hd + k);
                        }
                    }
                }
                let o32: Vec<f32> = o.iter().map(|&v| v as f32).collect();
                for k in 0..c {
                    want[(bi * l + i) * c + k] = affine(&o32, &ca.proj.weight, ca.proj.bias.as_ref(), k);
                }
            }
        }
        assert!(max_abs_diff(got.data(), &want) < 1e-5);
    }
}

#[test]
fn zero_context_cross_attention_reduces_to_mlp_path() {
    let mut rng = Rng::new(2);
    let mut ca = CrossAttention::new(&cfg(2, 4, 1, false), 6, &mut rng);
    ca.kv.bias = Some(Tensor::zeros(&[16]));
    ca.proj.bias = Some(Tensor::zeros(&[8]));
    assert_eq!(ca.mlp.hidden(), 16);
    let x = Tensor::randn(&[2, 5, 8], 1.0, &mut rng);
    let ctx = Tensor::zeros(&[2, 3, 6]);
    assert!(ca.attend(&ca.norm1.forward(&x).unwrap(), &ctx).unwrap().data().iter().all(|&v| v == 0.0));
    let full = ca.forward(&x, &ctx).unwrap();
    let mlp_only = x.add(&ca.mlp.forward(&ca.norm2.forward(&x).unwrap()).unwrap()).unwrap();
    assert!(full.data().iter().zip(mlp_only.data()).all(|(a, b)| (a - b).abs() < 1e-6));
}
