//! Optimiser, learning-rate schedule and the training loop.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use tecswin_tensor::{Rng, Tensor};

use crate::diffusion::{eps_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::textcond::{encode_batch, LayerPreset, TextEncoder};
use crate::unet::TecSwinModel;

/// Linear warmup then cosine decay to a floor, or a constant rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup_fraction: f64,
    pub constant: bool,
}

impl LrSchedule {
    pub fn pretrain() -> Self {
        Self {
            peak: 1.5e-4,
            floor: 1.5e-5,
            warmup_fraction: 0.005,
            constant: false,
        }
    }

    /// Rates for the desk-scale shapes model, which trains for only a
    /// couple of thousand steps.
    pub fn toy() -> Self {
        Self {
            peak: 1e-3,
            floor: 1e-4,
            warmup_fraction: 0.02,
            constant: false,
        }
    }

    pub fn finetune() -> Self {
        Self {
            peak: 1e-6,
            floor: 1e-6,
            warmup_fraction: 0.0,
            constant: true,
        }
    }

    pub fn warmup_steps(&self, total: usize) -> usize {
        if self.constant {
            return 0;
        }
        ((self.warmup_fraction * total as f64).ceil() as usize).max(1)
    }

    pub fn lr(&self, step: usize, total: usize) -> f64 {
        if self.constant {
            return self.peak;
        }
        let warm = self.warmup_steps(total);
        if step < warm {
            return self.peak * (step + 1) as f64 / warm as f64;
        }
        let span = total.saturating_sub(warm).max(1);
        let progress = ((step - warm) as f64 / span as f64).min(1.0);
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay; moments keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Applies one update using `grads` looked up by tensor identity.
    pub fn step(&mut self, module: &mut dyn Module, grads: &tecswin_tensor::Gradients, lr: f64) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let mut err = None;
        module.visit_mut("", &mut |name, t| {
            let Some(g) = grads.get(t) else { return };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let mut data = t.to_vec();
            for i in 0..data.len() {
                let gi = g[i] as f64;
                m[i] = (b1 * m[i] as f64 + (1.0 - b1) * gi) as f32;
                v[i] = (b2 * v[i] as f64 + (1.0 - b2) * gi * gi) as f32;
                let mh = m[i] as f64 / bc1;
                let vh = v[i] as f64 / bc2;
                let mut p = data[i] as f64;
                p -= lr * self.cfg.weight_decay * p;
                p -= lr * mh / (vh.sqrt() + self.cfg.eps);
                data[i] = p as f32;
            }
            match Tensor::from_vec(data, t.shape()) {
                Ok(nt) => *t = nt.requires_grad_leaf(),
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }
}

/// A source of training images paired with prompts.
pub trait TrainData {
    /// `[b, S, S, 3]` in `[-1, 1]` and one prompt per image.
    fn next_batch(&mut self, b: usize) -> Result<(Tensor, Vec<String>)>;
}

impl TrainData for crate::shapes::ShapesDataset {
    fn next_batch(&mut self, b: usize) -> Result<(Tensor, Vec<String>)> {
        let (x, labels) = self.batch(b)?;
        Ok((x, labels.iter().map(|c| c.prompt().to_string()).collect()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    pub mask_prob: f64,
    pub train_steps_grid: usize,
    pub seed: u64,
    pub layer_preset: LayerPreset,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: LrSchedule::pretrain(),
            adam: AdamConfig::default(),
            mask_prob: 0.2,
            train_steps_grid: crate::diffusion::TRAIN_STEPS,
            seed: 0,
            layer_preset: LayerPreset::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f32,
    pub lr: f64,
}

/// Caches encoded prompts so repeated captions are encoded once.
pub struct PromptCache<'a> {
    encoder: &'a dyn TextEncoder,
    preset: LayerPreset,
    cache: HashMap<String, Tensor>,
}

impl<'a> PromptCache<'a> {
    pub fn new(encoder: &'a dyn TextEncoder, preset: LayerPreset) -> Self {
        Self {
            encoder,
            preset,
            cache: HashMap::new(),
        }
    }

    /// `[B, Ltok, Denc]`.
    pub fn encode(&mut self, prompts: &[String]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(prompts.len());
        for p in prompts {
            if !self.cache.contains_key(p) {
                let t = encode_batch(self.encoder, &[p.as_str()], self.preset)?;
                self.cache.insert(p.clone(), t);
            }
            rows.push(self.cache[p].clone());
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        Ok(Tensor::concat(&refs, 0)?)
    }
}

/// Runs `cfg.steps` optimisation steps, calling `on_step` after each.
/// A non-finite loss aborts with [`Error::Diverged`].
pub fn train(
    model: &mut TecSwinModel,
    data: &mut dyn TrainData,
    encoder: &dyn TextEncoder,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&TrainRecord, &TecSwinModel) -> Result<()>,
) -> Result<Vec<TrainRecord>> {
    let sched = NoiseSchedule::cosine(cfg.train_steps_grid)?;
    let mut rng = Rng::new(cfg.seed).derive(1);
    let mut adam = Adam::new(cfg.adam.clone());
    let mut prompts = PromptCache::new(encoder, cfg.layer_preset);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (x0, caps) = data.next_batch(cfg.batch_size)?;
        let text = prompts.encode(&caps)?;
        let (loss, _) = eps_loss(&*model, &sched, &x0, &text, cfg.mask_prob, &mut rng)?;
        let lr = cfg.lr.lr(step, cfg.steps);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value, lr });
        }
        let grads = loss.backward()?;
        drop(loss);
        adam.step(model, &grads, lr)?;
        let rec = TrainRecord { step, loss: value, lr };
        on_step(&rec, model)?;
        log.push(rec);
    }
    Ok(log)
}

/// Mean of the first and last `window` losses.
pub fn loss_endpoints(log: &[TrainRecord], window: usize) -> (f64, f64) {
    let w = window.clamp(1, log.len().max(1));
    let mean = |s: &[TrainRecord]| s.iter().map(|r| r.loss as f64).sum::<f64>() / s.len().max(1) as f64;
    (mean(&log[..w.min(log.len())]), mean(&log[log.len().saturating_sub(w)..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_floor() {
        let s = LrSchedule::pretrain();
        let total = 2000;
        let warm = s.warmup_steps(total);
        assert_eq!(warm, 10);
        assert!(s.lr(0, total) < s.lr(warm - 1, total));
        assert!((s.lr(warm, total) - 1.5e-4).abs() < 1e-12);
        assert!((s.lr(total, total) - 1.5e-5).abs() < 1e-12);
        assert!((0..total).all(|i| s.lr(i, total) >= 1.5e-5 - 1e-15));
    }

    #[test]
    fn finetune_is_constant() {
        let s = LrSchedule::finetune();
        assert_eq!(s.lr(0, 10), 1e-6);
        assert_eq!(s.lr(9, 10), 1e-6);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = crate::nn::Linear::new(2, 1, &mut Rng::new(0));
        let before = p.weight.to_vec();
        let loss = p.forward(&Tensor::ones(&[1, 2])).unwrap().sum_all();
        let g = loss.backward().unwrap();
        Adam::new(AdamConfig::default()).step(&mut p, &g, 0.1).unwrap();
        // gradient of the weights is +1: first Adam step moves by -lr
        for (a, b) in p.weight.to_vec().iter().zip(before) {
            assert!((a - (b - 0.1)).abs() < 1e-5);
        }
    }
}
