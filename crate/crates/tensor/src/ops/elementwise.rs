//! Broadcasting binary ops and pointwise unary ops.

use crate::error::{Result, TensorError};
use crate::tensor::{contiguous_strides, numel, Tensor};

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides of `in_shape` viewed inside `out_shape`, zero on broadcast axes.
pub(crate) fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = contiguous_strides(in_shape);
    let mut strides = vec![0; rank];
    let off = rank - in_shape.len();
    for i in 0..in_shape.len() {
        if in_shape[i] != 1 {
            strides[off + i] = own[i];
        }
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out_shape`.
pub(crate) fn for_each_offset2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    if n == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out_shape[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut i = 0;
    while i < n {
        for k in 0..last {
            f(i + k, oa + k * la, ob + k * lb);
        }
        i += last;
        // carry over the outer axes
        let mut ax = rank - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums a gradient of `out_shape` down to the broadcast source `in_shape`.
pub(crate) fn reduce_to_shape(g: &[f32], out_shape: &[usize], in_shape: &[usize]) -> Vec<f32> {
    if out_shape == in_shape {
        return g.to_vec();
    }
    let strides = broadcast_strides(in_shape, out_shape);
    let zeros = vec![0; out_shape.len()];
    let mut acc = vec![0.0f32; numel(in_shape)];
    for_each_offset2(out_shape, &strides, &zeros, |i, a, _| acc[a] += g[i]);
    acc
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary(a: &Tensor, b: &Tensor, op: BinOp, name: &'static str) -> Result<Tensor> {
    let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
    let n = numel(&out_shape);
    let ad = a.data();
    let bd = b.data();
    let apply = |x: f32, y: f32| match op {
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Mul => x * y,
        BinOp::Div => x / y,
    };
    let mut out = Vec::with_capacity(n);
    if a.shape() == b.shape() {
        out.extend(ad.iter().zip(bd).map(|(&x, &y)| apply(x, y)));
    } else if a.shape() == out_shape.as_slice() && bd.len() > 0 && is_suffix(b.shape(), a.shape()) {
        let m = bd.len();
        for (i, &x) in ad.iter().enumerate() {
            out.push(apply(x, bd[i % m]));
        }
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        out.resize(n, 0.0);
        for_each_offset2(&out_shape, &sa, &sb, |i, oa, ob| out[i] = apply(ad[oa], bd[ob]));
    }

    let a_shape = a.shape().to_vec();
    let b_shape = b.shape().to_vec();
    let oshape = out_shape.clone();
    let (a_data, b_data) = match op {
        BinOp::Mul | BinOp::Div => (Some(a.data_arc()), Some(b.data_arc())),
        _ => (None, None),
    };
    Ok(Tensor::from_op(out, out_shape, &[a, b], move |g, needs| {
        let full_grad = |needs_it: bool, f: &dyn Fn() -> Vec<f32>| if needs_it { Some(f()) } else { None };
        match op {
            BinOp::Add => vec![
                full_grad(needs[0], &|| reduce_to_shape(g, &oshape, &a_shape)),
                full_grad(needs[1], &|| reduce_to_shape(g, &oshape, &b_shape)),
            ],
            BinOp::Sub => vec![
                full_grad(needs[0], &|| reduce_to_shape(g, &oshape, &a_shape)),
                full_grad(needs[1], &|| {
                    let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                    reduce_to_shape(&neg, &oshape, &b_shape)
                }),
            ],
            BinOp::Mul | BinOp::Div => {
                let ad = a_data.as_ref().unwrap();
                let bd = b_data.as_ref().unwrap();
                let sa = broadcast_strides(&a_shape, &oshape);
                let sb = broadcast_strides(&b_shape, &oshape);
                let mut ga = needs[0].then(|| vec![0.0f32; ad.len()]);
                let mut gb = needs[1].then(|| vec![0.0f32; bd.len()]);
                for_each_offset2(&oshape, &sa, &sb, |i, oa, ob| {
                    let (x, y) = (ad[oa], bd[ob]);
                    match op {
                        BinOp::Mul => {
                            if let Some(ga) = ga.as_mut() {
                                ga[oa] += g[i] * y;
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[ob] += g[i] * x;
                            }
                        }
                        _ => {
                            if let Some(ga) = ga.as_mut() {
                                ga[oa] += g[i] / y;
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[ob] -= g[i] * x / (y * y);
                            }
                        }
                    }
                });
                vec![ga, gb]
            }
        }
    }))
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn unary(
    x: &Tensor,
    f: impl Fn(f32) -> f32,
    df: impl Fn(f32, f32) -> f32 + Send + Sync + 'static,
) -> Tensor {
    let out: Vec<f32> = x.data().iter().map(|&v| f(v)).collect();
    let xd = x.data_arc();
    Tensor::from_op(out, x.shape().to_vec(), &[x], move |g, _| {
        vec![Some(
            g.iter()
                .zip(xd.iter())
                .map(|(&gi, &xi)| gi * df(xi, gi))
                .collect(),
        )]
    })
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))) as f32
}

fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    (cdf + x * pdf) as f32
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pointwise nonlinearities used by the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Div, "div")
    }

    pub fn mul_scalar(&self, s: f32) -> Tensor {
        unary(self, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f32) -> Tensor {
        unary(self, move |v| v + s, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Tensor {
        unary(self, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn gelu(&self) -> Tensor {
        unary(self, gelu_scalar, |x, _| gelu_grad(x))
    }

    pub fn silu(&self) -> Tensor {
        unary(
            self,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn activation(&self, kind: Activation) -> Tensor {
        match kind {
            Activation::Gelu => self.gelu(),
            Activation::Silu => self.silu(),
        }
    }
}
