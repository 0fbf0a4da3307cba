use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

impl Tensor {
    /// Sum of all elements (accumulated in f64) as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let n = self.numel();
        Tensor::from_op(vec![s as f32], Vec::new(), &[self], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum_all().mul_scalar(1.0 / n as f32)
    }

    /// Sum over one axis.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(dim_err("sum_axis", format!("axis {axis} for shape {:?}", self.shape())));
        }
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0.0f64;
                for l in 0..len {
                    s += x[(o * len + l) * inner + i] as f64;
                }
                out[o * inner + i] = s as f32;
            }
        }
        let mut oshape = shape.to_vec();
        if keepdim {
            oshape[axis] = 1;
        } else {
            oshape.remove(axis);
        }
        Ok(Tensor::from_op(out, oshape, &[self], move |g, _| {
            let mut gx = vec![0.0f32; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                    dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| dim_err("mean_axis", format!("axis {axis} for {:?}", self.shape())))?;
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(1.0 / len.max(1) as f32))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums() {
        let x = Tensor::from_vec((0..6).map(|v| v as f32).collect(), &[2, 3]).unwrap();
        assert_eq!(x.sum_all().item(), 15.0);
        assert_eq!(x.sum_axis(0, false).unwrap().to_vec(), vec![3.0, 5.0, 7.0]);
        let r = x.sum_axis(1, true).unwrap();
        assert_eq!(r.shape(), &[2, 1]);
        assert_eq!(r.to_vec(), vec![3.0, 12.0]);
        assert_eq!(x.mean_axis(1, false).unwrap().to_vec(), vec![1.0, 4.0]);
    }
}
