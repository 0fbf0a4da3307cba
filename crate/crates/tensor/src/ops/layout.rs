//! Shape and layout ops. Everything that moves values without arithmetic is
//! expressed as a gather through an index map, whose adjoint is a
//! scatter-add.

use std::sync::Arc;

use crate::error::{dim_err, Result, TensorError};
use crate::tensor::{contiguous_strides, numel, Tensor};

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op_shared(
            self.data_arc(),
            shape.to_vec(),
            &[self],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    /// `out[i] = self[index[i]]`, shaped `out_shape`.
    pub fn gather_flat(&self, index: Arc<Vec<u32>>, out_shape: &[usize]) -> Result<Tensor> {
        if numel(out_shape) != index.len() {
            return Err(dim_err("gather", "index length does not match output shape"));
        }
        let n = self.numel();
        if index.iter().any(|&i| i as usize >= n) {
            return Err(dim_err("gather", "index out of range"));
        }
        let x = self.data();
        let out: Vec<f32> = index.iter().map(|&i| x[i as usize]).collect();
        Ok(Tensor::from_op(out, out_shape.to_vec(), &[self], move |g, _| {
            let mut gx = vec![0.0f32; n];
            for (gi, &i) in g.iter().zip(index.iter()) {
                gx[i as usize] += gi;
            }
            vec![Some(gx)]
        }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err("permute", format!("{perm:?} for rank {rank}")));
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let in_strides = contiguous_strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let index = strided_index(&out_shape, &strides);
        self.gather_flat(Arc::new(index), &out_shape)
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(dim_err("transpose", format!("axes {a},{b} for {:?}", self.shape())));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err(
                "narrow",
                format!("axis {axis} range {start}+{len} for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(out, oshape, &[self], move |g, _| {
            let mut gx = vec![0.0f32; n];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates tensors along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| dim_err("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(dim_err("concat", format!("axis {axis} for rank {rank}")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut oshape = first.shape().to_vec();
        oshape[axis] = total;
        let lens_c = lens.clone();
        Ok(Tensor::from_op(out, oshape, parts, move |g, needs| {
            let mut grads: Vec<Option<Vec<f32>>> = lens_c
                .iter()
                .zip(needs)
                .map(|(&l, &need)| need.then(|| Vec::with_capacity(outer * l * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens_c) {
                    if let Some(gp) = gp.as_mut() {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                    }
                    off += l * inner;
                }
            }
            grads
        }))
    }

    /// Sub-pixel rearrangement `[B,H,W,4C] -> [B,2H,2W,C]`.
    ///
    /// Input channel `c*4 + dy*2 + dx` lands at output pixel
    /// `(2h+dy, 2w+dx)`, channel `c`.
    pub fn pixel_shuffle(&self) -> Result<Tensor> {
        let (b, h, w, c4) = dims4("pixel_shuffle", self)?;
        if c4 % 4 != 0 {
            return Err(dim_err("pixel_shuffle", format!("channels {c4} not divisible by 4")));
        }
        let c = c4 / 4;
        let out_shape = [b, 2 * h, 2 * w, c];
        let mut index = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    let (y, dy, x, dx) = (oy / 2, oy % 2, ox / 2, ox % 2);
                    for ci in 0..c {
                        let src = ((bi * h + y) * w + x) * c4 + ci * 4 + dy * 2 + dx;
                        index.push(src as u32);
                    }
                }
            }
        }
        self.gather_flat(Arc::new(index), &out_shape)
    }

    /// Inverse of [`Tensor::pixel_shuffle`]: `[B,2H,2W,C] -> [B,H,W,4C]`.
    pub fn pixel_unshuffle(&self) -> Result<Tensor> {
        let (b, h2, w2, c) = dims4("pixel_unshuffle", self)?;
        if h2 % 2 != 0 || w2 % 2 != 0 {
            return Err(dim_err("pixel_unshuffle", format!("odd spatial dims {h2}x{w2}")));
        }
        let (h, w) = (h2 / 2, w2 / 2);
        let mut index = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        for d in 0..4 {
                            let (dy, dx) = (d / 2, d % 2);
                            let src = ((bi * h2 + 2 * y + dy) * w2 + 2 * x + dx) * c + ci;
                            index.push(src as u32);
                        }
                    }
                }
            }
        }
        self.gather_flat(Arc::new(index), &[b, h, w, 4 * c])
    }

    /// Tiles `[B,H,W,C]` into `[B*(H/win)*(W/win), win*win, C]`, windows in
    /// row-major order per image.
    pub fn window_partition(&self, win: usize) -> Result<Tensor> {
        let (b, h, w, c) = dims4("window_partition", self)?;
        if win == 0 || h % win != 0 || w % win != 0 {
            return Err(dim_err(
                "window_partition",
                format!("{h}x{w} not divisible by window {win}"),
            ));
        }
        let (nh, nw) = (h / win, w / win);
        let mut index = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for wy in 0..nh {
                for wx in 0..nw {
                    for ty in 0..win {
                        for tx in 0..win {
                            let base = ((bi * h + wy * win + ty) * w + wx * win + tx) * c;
                            index.extend((base..base + c).map(|i| i as u32));
                        }
                    }
                }
            }
        }
        self.gather_flat(Arc::new(index), &[b * nh * nw, win * win, c])
    }

    /// Inverse of [`Tensor::window_partition`].
    pub fn window_reverse(&self, win: usize, h: usize, w: usize) -> Result<Tensor> {
        if self.rank() != 3 || win == 0 || h % win != 0 || w % win != 0 {
            return Err(dim_err(
                "window_reverse",
                format!("shape {:?} window {win} image {h}x{w}", self.shape()),
            ));
        }
        let (nh, nw) = (h / win, w / win);
        let (n, t, c) = (self.dim(0), self.dim(1), self.dim(2));
        if t != win * win || n % (nh * nw) != 0 {
            return Err(dim_err("window_reverse", format!("shape {:?}", self.shape())));
        }
        let b = n / (nh * nw);
        let mut index = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let wi = (bi * nh + y / win) * nw + x / win;
                    let ti = (y % win) * win + x % win;
                    let base = (wi * t + ti) * c;
                    index.extend((base..base + c).map(|i| i as u32));
                }
            }
        }
        self.gather_flat(Arc::new(index), &[b, h, w, c])
    }

    /// Toroidal roll of `[B,H,W,C]`: `out[y][x] = in[y-dy][x-dx]` (mod H, W).
    pub fn cyclic_shift(&self, dy: isize, dx: isize) -> Result<Tensor> {
        let (b, h, w, c) = dims4("cyclic_shift", self)?;
        if (dy == 0 && dx == 0) || h == 0 || w == 0 {
            return Ok(self.clone());
        }
        let mut index = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for y in 0..h {
                let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                for x in 0..w {
                    let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
                    let base = ((bi * h + sy) * w + sx) * c;
                    index.extend((base..base + c).map(|i| i as u32));
                }
            }
        }
        self.gather_flat(Arc::new(index), &[b, h, w, c])
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [b, h, w, c] => Ok((*b, *h, *w, *c)),
        s => Err(dim_err(op, format!("expected [B,H,W,C], got {s:?}"))),
    }
}

/// Flat source index for each element of `out_shape` under `strides`.
fn strided_index(out_shape: &[usize], strides: &[usize]) -> Vec<u32> {
    let n = numel(out_shape);
    let mut index = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        index.push(off as u32);
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    index
}
