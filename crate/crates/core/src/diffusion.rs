//! Forward noising, the noise-prediction loss and ancestral sampling with
//! classifier-free guidance.

use serde::{Deserialize, Serialize};
use tecswin_tensor::{Rng, Tensor};

use crate::error::{Error, Result};
use crate::unet::TecSwinModel;

pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;
pub const TRAIN_STEPS: usize = 1000;

/// `alpha_bar(t)` of the cosine schedule for `t` in `[0, 1]`.
pub fn cosine_alpha_bar(t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Schedule(format!("continuous time {t} outside [0, 1]")));
    }
    let f = |u: f64| ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    Ok(f(t) / f(0.0))
}

/// Discretized cosine schedule over `0..=steps`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub alpha_bar: Vec<f64>,
    /// `beta[t]` for `t >= 1`; `beta[0] = 0`.
    pub beta: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas from consecutive ratios, clipped at [`MAX_BETA`] so the last
    /// `alpha_bar` stays positive.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("schedule needs at least one step".into()));
        }
        let mut alpha_bar = vec![1.0f64; steps + 1];
        let mut beta = vec![0.0f64; steps + 1];
        for t in 1..=steps {
            let ratio = cosine_alpha_bar(t as f64 / steps as f64)? / cosine_alpha_bar((t - 1) as f64 / steps as f64)?;
            beta[t] = (1.0 - ratio).clamp(0.0, MAX_BETA);
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
        }
        Ok(Self { steps, alpha_bar, beta })
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check(t)?])
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t > self.steps {
            return Err(Error::TimestepRange { t, max: self.steps });
        }
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub cond_scale: f32,
    pub mask_prob: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            cond_scale: 1.14,
            mask_prob: 0.2,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cond_scale >= 0.0) || !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("invalid guidance {self:?}")));
        }
        Ok(())
    }
}

fn per_sample(x: &Tensor, coef: &[f32]) -> Result<Tensor> {
    let mut shape = vec![1usize; x.rank()];
    shape[0] = coef.len();
    Ok(x.mul(&Tensor::from_slice(coef, &shape)?)?)
}

/// `sqrt(ab_t) x0 + sqrt(1 - ab_t) noise` with one timestep per sample.
pub fn q_sample_batch(sched: &NoiseSchedule, x0: &Tensor, t: &[usize], noise: &Tensor) -> Result<Tensor> {
    if x0.shape() != noise.shape() || t.len() != x0.dim(0) {
        return Err(Error::Config(format!(
            "q_sample: x0 {:?}, noise {:?}, {} timesteps",
            x0.shape(),
            noise.shape(),
            t.len()
        )));
    }
    let mut a = Vec::with_capacity(t.len());
    let mut s = Vec::with_capacity(t.len());
    for &ti in t {
        let ab = sched.alpha_bar(ti)?;
        a.push(ab.sqrt() as f32);
        s.push((1.0 - ab).sqrt() as f32);
    }
    Ok(per_sample(x0, &a)?.add(&per_sample(noise, &s)?)?)
}

/// Single-timestep form of [`q_sample_batch`] for any shape.
pub fn q_sample(sched: &NoiseSchedule, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
    if x0.shape() != noise.shape() {
        return Err(Error::Config("q_sample: noise shape differs from x0".into()));
    }
    let ab = sched.alpha_bar(t)?;
    if ab == 1.0 {
        return Ok(x0.clone());
    }
    Ok(x0.mul_scalar(ab.sqrt() as f32).add(&noise.mul_scalar((1.0 - ab).sqrt() as f32))?)
}

/// Anything that predicts the injected noise.
pub trait Denoiser {
    /// `masked[i]` replaces sample `i`'s text with the null context.
    fn predict(&self, x_t: &Tensor, t: &[usize], text: &Tensor, masked: &[bool]) -> Result<Tensor>;
}

impl Denoiser for TecSwinModel {
    fn predict(&self, x_t: &Tensor, t: &[usize], text: &Tensor, masked: &[bool]) -> Result<Tensor> {
        self.forward(x_t, t, text, masked)
    }
}

/// Random draws behind one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossDraw {
    pub t: Vec<usize>,
    pub masked: Vec<bool>,
}

/// Mean squared error between injected and predicted noise with uniform
/// `t in 1..=T` and Bernoulli prompt masking.
pub fn eps_loss(
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    x0: &Tensor,
    text: &Tensor,
    mask_prob: f64,
    rng: &mut Rng,
) -> Result<(Tensor, LossDraw)> {
    let b = x0.dim(0);
    let t: Vec<usize> = (0..b).map(|_| 1 + rng.below(sched.steps)).collect();
    let masked: Vec<bool> = (0..b).map(|_| rng.bernoulli(mask_prob)).collect();
    let noise = Tensor::randn(x0.shape(), 1.0, rng);
    let x_t = q_sample_batch(sched, x0, &t, &noise)?;
    let eps = model.predict(&x_t, &t, text, &masked)?;
    let loss = eps.sub(&noise)?.square().mean_all();
    Ok((loss, LossDraw { t, masked }))
}

/// `eps_u + s (eps_c - eps_u)`; `s = 1` and `s = 0` return the inputs
/// untouched.
pub fn guided_eps(eps_c: &Tensor, eps_u: &Tensor, s: f32) -> Result<Tensor> {
    if eps_c.shape() != eps_u.shape() {
        return Err(Error::Config(format!(
            "guidance shapes differ: {:?} vs {:?}",
            eps_c.shape(),
            eps_u.shape()
        )));
    }
    if s == 1.0 {
        return Ok(eps_c.clone());
    }
    if s == 0.0 {
        return Ok(eps_u.clone());
    }
    Ok(eps_u.add(&eps_c.sub(eps_u)?.mul_scalar(s))?)
}

/// One ancestral step `t -> t_prev` (any `t_prev < t`) with the lower
/// posterior variance; no noise is added when `t_prev == 0`.
pub fn ddpm_step(
    sched: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor,
    rng: &mut Rng,
    clip_x0: bool,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::Schedule(format!("step must go backwards, got {t} -> {t_prev}")));
    }
    let ab_t = sched.alpha_bar(t)?;
    let ab_p = sched.alpha_bar(t_prev)?;
    let xt = x_t.data();
    let eps = eps_hat.data();
    if xt.len() != eps.len() {
        return Err(Error::Config("ddpm_step: eps shape differs from x_t".into()));
    }
    let alpha = ab_t / ab_p;
    let beta = 1.0 - alpha;
    let c0 = ab_p.sqrt() * beta / (1.0 - ab_t);
    let ct = alpha.sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
    let std = (beta * (1.0 - ab_p) / (1.0 - ab_t)).max(0.0).sqrt();
    let (sa, sn) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let noise = if t_prev > 0 { rng.normal_vec(xt.len(), 1.0) } else { Vec::new() };
    let out = xt
        .iter()
        .zip(eps)
        .enumerate()
        .map(|(i, (&x, &e))| {
            let mut x0 = (x as f64 - sn * e as f64) / sa;
            if clip_x0 {
                x0 = x0.clamp(-1.0, 1.0);
            }
            if t_prev == 0 {
                return x0 as f32;
            }
            (c0 * x0 + ct * x as f64 + std * noise[i] as f64) as f32
        })
        .collect();
    Ok(Tensor::from_vec(out, x_t.shape())?)
}

/// Ancestral sampling over `timesteps` (strictly decreasing, ending at 0).
///
/// Each step evaluates the conditional branch and, unless `cond_scale` is
/// exactly 1, the null-context branch. The result is clipped to `[-1, 1]`.
pub fn sample_loop(
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    text: &Tensor,
    shape: &[usize],
    timesteps: &[usize],
    cond_scale: f32,
    rng: &mut Rng,
) -> Result<Tensor> {
    validate_timesteps(timesteps, sched.steps)?;
    let b = shape[0];
    let mut x = Tensor::randn(shape, 1.0, rng);
    let cond = vec![false; b];
    let null = vec![true; b];
    tecswin_tensor::no_grad(|| -> Result<()> {
        for pair in timesteps.windows(2) {
            let (t, t_prev) = (pair[0], pair[1]);
            let tt = vec![t; b];
            let eps_c = model.predict(&x, &tt, text, &cond)?;
            let eps = if cond_scale == 1.0 {
                eps_c
            } else {
                let eps_u = model.predict(&x, &tt, text, &null)?;
                guided_eps(&eps_c, &eps_u, cond_scale)?
            };
            x = ddpm_step(sched, &x, t, t_prev, &eps, rng, true)?;
        }
        Ok(())
    })?;
    let clipped = x.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    Ok(Tensor::from_vec(clipped, shape)?)
}

pub fn validate_timesteps(ts: &[usize], max: usize) -> Result<()> {
    if ts.len() < 2 {
        return Err(Error::Schedule("need at least one denoising step".into()));
    }
    if ts[0] > max {
        return Err(Error::TimestepRange { t: ts[0], max });
    }
    if *ts.last().unwrap() != 0 {
        return Err(Error::Schedule("timesteps must end at 0".into()));
    }
    if ts.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Schedule("timesteps must be strictly decreasing".into()));
    }
    Ok(())
}
