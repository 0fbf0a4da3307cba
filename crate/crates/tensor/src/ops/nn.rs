//! Fused normalisation and softmax kernels over the last axis.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LN_EPS: f32 = 1e-5;

impl Tensor {
    /// Layer normalisation over the last axis followed by `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        let c = *self.shape().last().ok_or_else(|| dim_err("layer_norm", "rank 0 input"))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(dim_err(
                "layer_norm",
                format!(
                    "channels {c} vs gamma {:?} beta {:?}",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(dim_err("layer_norm", "eps must be positive"));
        }
        let rows = self.numel() / c.max(1);
        let x = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut out = vec![0.0f32; x.len()];
        let mut xhat = vec![0.0f32; x.len()];
        let mut rstd = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..c {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gd[j] + bd[j];
            }
        }
        let gamma_d = gamma.data_arc();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            &[self, gamma, beta],
            move |g, needs| {
                let mut gx = needs[0].then(|| vec![0.0f32; g.len()]);
                let mut gg = needs[1].then(|| vec![0.0f32; c]);
                let mut gb = needs[2].then(|| vec![0.0f32; c]);
                for r in 0..rows {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    if let Some(gg) = gg.as_mut() {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        for j in 0..c {
                            gb[j] += gr[j];
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mut mean_g = 0.0f64;
                        let mut mean_gh = 0.0f64;
                        for j in 0..c {
                            let d = (gr[j] * gamma_d[j]) as f64;
                            mean_g += d;
                            mean_gh += d * hr[j] as f64;
                        }
                        mean_g /= c as f64;
                        mean_gh /= c as f64;
                        for j in 0..c {
                            let d = (gr[j] * gamma_d[j]) as f64;
                            gx[r * c + j] =
                                (rstd[r] as f64 * (d - mean_g - hr[j] as f64 * mean_gh)) as f32;
                        }
                    }
                }
                vec![gx, gg, gb]
            },
        ))
    }

    /// Softmax over the last axis. `-inf` entries receive zero weight as
    /// long as each row holds at least one finite value.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let c = *self.shape().last().ok_or_else(|| dim_err("softmax", "rank 0 input"))?;
        let rows = self.numel() / c.max(1);
        let x = self.data();
        let mut out = vec![0.0f32; x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[r * c + j] = e;
                sum += e as f64;
            }
            let inv = (1.0 / sum) as f32;
            for v in &mut out[r * c..(r + 1) * c] {
                *v *= inv;
            }
        }
        let y = std::sync::Arc::new(out);
        let y_saved = y.clone();
        Ok(Tensor::from_op_shared(y, self.shape().to_vec(), &[self], move |g, _| {
            let mut gx = vec![0.0f32; g.len()];
            for r in 0..rows {
                let yr = &y_saved[r * c..(r + 1) * c];
                let gr = &g[r * c..(r + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| (a * b) as f64).sum();
                for j in 0..c {
                    gx[r * c + j] = yr[j] * (gr[j] - dot as f32);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Softmax along an arbitrary axis.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(dim_err("softmax", format!("axis {axis} for {:?}", self.shape())));
        }
        if axis == rank - 1 {
            return self.softmax_last();
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(axis, rank - 1);
        self.permute(&perm)?.softmax_last()?.permute(&perm)
    }
}
