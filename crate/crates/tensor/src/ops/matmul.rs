//! Batched matrix products backed by `matrixmultiply::sgemm`.

use crate::error::{dim_err, Result};
use crate::ops::elementwise::{broadcast_shape, broadcast_strides, for_each_offset2};
use crate::tensor::{numel, Tensor};

/// One strided GEMM: `c = alpha * op(a) * op(b) + beta * c`, row-major
/// buffers with optional transposition expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    // a is stored as [m,k] (or [k,m] when transposed); same for b.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths checked above cover every strided access.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Plan {
    m: usize,
    k: usize,
    n: usize,
    out_batch: Vec<usize>,
    /// (out batch index, a batch offset, b batch offset)
    pairs: Vec<(usize, usize, usize)>,
    /// b is a single matrix shared by every batch of a
    shared_b: bool,
}

fn plan(a: &[usize], b: &[usize]) -> Result<Plan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(dim_err("matmul", format!("need rank >= 2, got {a:?} x {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(dim_err("matmul", format!("inner dims differ: {a:?} x {b:?}")));
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let out_batch = broadcast_shape("matmul", ba, bb)?;
    let sa = broadcast_strides(ba, &out_batch);
    let sb = broadcast_strides(bb, &out_batch);
    let mut pairs = Vec::with_capacity(numel(&out_batch));
    for_each_offset2(&out_batch, &sa, &sb, |i, oa, ob| pairs.push((i, oa, ob)));
    let shared_b = numel(bb) == 1 && numel(ba) == numel(&out_batch);
    Ok(Plan {
        m,
        k,
        n,
        out_batch,
        pairs,
        shared_b,
    })
}

impl Tensor {
    /// `[.., m, k] x [.., k, n] -> [.., m, n]` with broadcast batch axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let p = plan(self.shape(), other.shape())?;
        let (m, k, n) = (p.m, p.k, p.n);
        let nb = p.pairs.len();
        let mut out = vec![0.0f32; nb * m * n];
        let ad = self.data();
        let bd = other.data();
        if p.shared_b {
            gemm(nb * m, k, n, ad, false, bd, false, &mut out, 0.0);
        } else {
            for &(i, oa, ob) in &p.pairs {
                gemm(
                    m,
                    k,
                    n,
                    &ad[oa * m * k..],
                    false,
                    &bd[ob * k * n..],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let mut shape = p.out_batch.clone();
        shape.extend([m, n]);
        let a_data = self.data_arc();
        let b_data = other.data_arc();
        let (a_len, b_len) = (ad.len(), bd.len());
        Ok(Tensor::from_op(out, shape, &[self, other], move |g, needs| {
            let mut ga = needs[0].then(|| vec![0.0f32; a_len]);
            let mut gb = needs[1].then(|| vec![0.0f32; b_len]);
            if p.shared_b {
                let rows = nb * m;
                if let Some(ga) = ga.as_mut() {
                    gemm(rows, n, k, g, false, &b_data, true, ga, 0.0);
                }
                if let Some(gb) = gb.as_mut() {
                    gemm(k, rows, n, &a_data, true, g, false, gb, 0.0);
                }
            } else {
                for &(i, oa, ob) in &p.pairs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        // dA += dC * B^T
                        gemm(
                            m,
                            n,
                            k,
                            gi,
                            false,
                            &b_data[ob * k * n..],
                            true,
                            &mut ga[oa * m * k..(oa + 1) * m * k],
                            1.0,
                        );
                    }
                    if let Some(gb) = gb.as_mut() {
                        // dB += A^T * dC
                        gemm(
                            k,
                            m,
                            n,
                            &a_data[oa * m * k..],
                            true,
                            gi,
                            false,
                            &mut gb[ob * k * n..(ob + 1) * k * n],
                            1.0,
                        );
                    }
                }
            }
            vec![ga, gb]
        }))
    }

    /// Affine map over the last axis: `x[.., in] * w[in, out] + b[out]`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        if w.rank() != 2 || self.rank() < 1 || self.dim(self.rank() - 1) != w.dim(0) {
            return Err(dim_err(
                "linear",
                format!("input {:?} vs weight {:?}", self.shape(), w.shape()),
            ));
        }
        let y = if self.rank() == 1 {
            self.reshape(&[1, w.dim(0)])?.matmul(w)?.reshape(&[w.dim(1)])?
        } else {
            self.matmul(w)?
        };
        match b {
            Some(b) => {
                if b.shape() != [w.dim(1)] {
                    return Err(dim_err(
                        "linear",
                        format!("bias {:?} vs out {}", b.shape(), w.dim(1)),
                    ));
                }
                y.add(b)
            }
            None => Ok(y),
        }
    }
}
