//! Central-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function, so it stays
//! independent of the backward kernels it is used to verify.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f32,
    /// Coordinates probed per input; `None` probes every coordinate.
    pub samples_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            samples_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub input: usize,
    pub coords: usize,
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` in the l2 norm
    /// over the probed coordinates.
    pub rel_error: f64,
    pub max_abs_error: f64,
    /// Squared l2 norms over the probed coordinates: difference, analytic,
    /// numeric.
    pub sq_norms: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    /// Relative error of all probed coordinates taken as one vector.
    pub fn pooled_rel_error(&self) -> f64 {
        let [d, a, n] = self.inputs.iter().fold([0.0; 3], |acc, c| {
            [acc[0] + c.sq_norms[0], acc[1] + c.sq_norms[1], acc[2] + c.sq_norms[2]]
        });
        let denom = a.sqrt().max(n.sqrt());
        if denom == 0.0 {
            0.0
        } else {
            d.sqrt() / denom
        }
    }
}

/// Compares the tape gradient of `f` against central differences for every
/// tensor in `inputs`. `f` must return a scalar.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.requires_grad_leaf()).collect();
    let loss = f(&leaves)?;
    let grads = loss.backward()?;

    let mut rng = Rng::new(opts.seed);
    let mut report = Vec::with_capacity(inputs.len());
    for (i, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let analytic: Vec<f32> = grads
            .get(leaf)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match opts.samples_per_input {
            Some(k) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };
        let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for &j in &coords {
            let numeric = no_grad(|| -> Result<f64> {
                let eval = |delta: f32| -> Result<f64> {
                    let mut data = inputs[i].to_vec();
                    data[j] += delta;
                    let mut probe: Vec<Tensor> = inputs.iter().map(|t| t.detach()).collect();
                    probe[i] = Tensor::from_vec(data, inputs[i].shape())?;
                    Ok(f(&probe)?.item() as f64)
                };
                Ok((eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step as f64))
            })?;
            let a = analytic[j] as f64;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
        report.push(InputCheck {
            input: i,
            coords: coords.len(),
            rel_error,
            max_abs_error: max_abs,
            sq_norms: [diff2, a2, n2],
        });
    }
    Ok(GradCheckReport { inputs: report })
}
