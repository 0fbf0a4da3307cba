//! Encoder, middle and decoder groups joined by skip connections.

use tecswin_tensor::{Rng, Tensor};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{impl_module, LayerNorm, Linear, Module};
use crate::swin::{ContextBundle, SwinStage};
use crate::textcond::{ContextAssembler, TimeEmbedding};

fn expect_nhwc(x: &Tensor, op: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, h, w, c] => Ok([b, h, w, c]),
        _ => Err(Error::Config(format!("{op} expects [B,H,W,C], got {:?}", x.shape()))),
    }
}

/// 2x2 neighbourhoods to channels, `4C -> 2C` projection, then LayerNorm.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub reduction: Linear,
    pub norm: LayerNorm,
}
impl_module!(PatchMerge { reduction, norm });

impl PatchMerge {
    pub fn new(c: usize, rng: &mut Rng) -> Self {
        Self {
            reduction: Linear::new(4 * c, 2 * c, rng),
            norm: LayerNorm::new(2 * c),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [_, h, w, _] = expect_nhwc(x, "patch_merge")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("patch_merge needs even sides, got {h}x{w}")));
        }
        Ok(self.norm.forward(&self.reduction.forward(&x.pixel_unshuffle()?)?)?)
    }
}

/// `C -> 2C` projection, SiLU, pixel shuffle to `C/2` channels at twice the
/// resolution, then LayerNorm.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub expand: Linear,
    pub norm: LayerNorm,
}
impl_module!(PatchExpand { expand, norm });

impl PatchExpand {
    pub fn new(c: usize, rng: &mut Rng) -> Self {
        Self {
            expand: Linear::new(c, 2 * c, rng),
            norm: LayerNorm::new(c / 2),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [.., c] = expect_nhwc(x, "patch_expand")?;
        if c % 2 != 0 {
            return Err(Error::Config(format!("patch_expand needs even channels, got {c}")));
        }
        let up = self.expand.forward(x)?.silu().pixel_shuffle()?;
        Ok(self.norm.forward(&up)?)
    }
}

/// Channel concat of decoder and encoder features, projected back to `C`.
#[derive(Clone, Debug)]
pub struct SkipFuse {
    pub proj: Linear,
}
impl_module!(SkipFuse { proj });

impl SkipFuse {
    pub fn new(c: usize, rng: &mut Rng) -> Self {
        Self {
            proj: Linear::new(2 * c, c, rng),
        }
    }

    pub fn forward(&self, dec: &Tensor, enc: &Tensor) -> Result<Tensor> {
        if dec.shape() != enc.shape() {
            return Err(Error::Config(format!(
                "skip shapes differ: {:?} vs {:?}",
                dec.shape(),
                enc.shape()
            )));
        }
        Ok(self.proj.forward(&Tensor::concat(&[dec, enc], 3)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub in_proj: Linear,
    pub encoder: Vec<SwinStage>,
    pub merges: Vec<PatchMerge>,
    pub middle: SwinStage,
    pub skips: Vec<SkipFuse>,
    pub decoder: Vec<SwinStage>,
    pub expands: Vec<PatchExpand>,
    pub out_norm: LayerNorm,
    pub out_proj: Linear,
}
impl_module!(UNet { in_proj, encoder, merges, middle, skips, decoder, expands, out_norm, out_proj });

impl UNet {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.num_stages();
        let c0 = cfg.base_channels;
        let in_proj = Linear::new(cfg.in_channels, c0, rng);
        let mut encoder = Vec::with_capacity(n);
        let mut merges = Vec::with_capacity(n - 1);
        for level in 0..n {
            let layout = cfg.stage(level);
            encoder.push(SwinStage::new(cfg, layout, cfg.depths[level], rng)?);
            if level + 1 < n {
                merges.push(PatchMerge::new(layout.channels, rng));
            }
        }
        let middle = SwinStage::new(cfg, cfg.deepest(), cfg.middle_depth, rng)?;
        // decoder runs deepest first; expands[i] follows decoder[i]
        let mut skips = Vec::with_capacity(n);
        let mut decoder = Vec::with_capacity(n);
        let mut expands = Vec::with_capacity(n - 1);
        for level in (0..n).rev() {
            let layout = cfg.stage(level);
            skips.push(SkipFuse::new(layout.channels, rng));
            decoder.push(SwinStage::new(cfg, layout, cfg.depths[level], rng)?);
            if level > 0 {
                expands.push(PatchExpand::new(layout.channels, rng));
            }
        }
        Ok(Self {
            in_proj,
            encoder,
            merges,
            middle,
            skips,
            decoder,
            expands,
            out_norm: LayerNorm::new(c0),
            out_proj: Linear::new(c0, cfg.in_channels, rng),
        })
    }

    /// `x: [B,S,S,3]`, `cond: [B,D]`.
    pub fn forward(&self, x: &Tensor, cond: &Tensor, ctx: &ContextBundle) -> Result<Tensor> {
        let mut h = self.in_proj.forward(x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (i, stage) in self.encoder.iter().enumerate() {
            h = stage.forward(&h, cond, ctx)?;
            skips.push(h.clone());
            if let Some(m) = self.merges.get(i) {
                h = m.forward(&h)?;
            }
        }
        h = self.middle.forward(&h, cond, ctx)?;
        for (i, stage) in self.decoder.iter().enumerate() {
            let enc = skips.pop().expect("one skip per level");
            h = self.skips[i].forward(&h, &enc)?;
            h = stage.forward(&h, cond, ctx)?;
            if let Some(e) = self.expands.get(i) {
                h = e.forward(&h)?;
            }
        }
        Ok(self.out_proj.forward(&self.out_norm.forward(&h)?)?)
    }
}

/// Full noise predictor: time embedding, context assembly and U-Net.
#[derive(Clone, Debug)]
pub struct TecSwinModel {
    pub config: ModelConfig,
    pub time: TimeEmbedding,
    pub context: ContextAssembler,
    pub unet: UNet,
}
impl_module!(TecSwinModel { time, context, unet });

impl TecSwinModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let time = TimeEmbedding::new(config.ctx_dim, &mut rng);
        let context = ContextAssembler::new(
            config.text_tokens,
            config.text_dim,
            config.ctx_tokens,
            config.ctx_dim,
            &mut rng,
        );
        let unet = UNet::new(&config, &mut rng)?;
        Ok(Self {
            config,
            time,
            context,
            unet,
        })
    }

    pub fn context_for(&self, t: &[usize], text: &Tensor, masked: &[bool]) -> Result<(Tensor, ContextBundle)> {
        let temb = self.time.forward(t)?;
        let ctx = self.context.forward(text, &temb, masked)?;
        Ok((temb, ctx))
    }

    pub fn null_context_for(&self, t: &[usize]) -> Result<(Tensor, ContextBundle)> {
        let temb = self.time.forward(t)?;
        let ctx = self.context.null_bundle(&temb)?;
        Ok((temb, ctx))
    }

    /// Noise prediction given an assembled context.
    pub fn forward_with_context(&self, x: &Tensor, temb: &Tensor, ctx: &ContextBundle) -> Result<Tensor> {
        let s = self.config.image_size;
        let [b, h, w, c] = expect_nhwc(x, "model")?;
        if h != s || w != s || c != self.config.in_channels || b != ctx.batch() {
            return Err(Error::Config(format!(
                "input {:?} does not match image size {s}, {} channels, context batch {}",
                x.shape(),
                self.config.in_channels,
                ctx.batch()
            )));
        }
        let cond = temb.add(&ctx.pooled)?;
        self.unet.forward(x, &cond, ctx)
    }

    /// `x_t: [B,S,S,3]`, `t`: per-sample timesteps, `text: [B,Ltok,Denc]`.
    pub fn forward(&self, x_t: &Tensor, t: &[usize], text: &Tensor, masked: &[bool]) -> Result<Tensor> {
        let (temb, ctx) = self.context_for(t, text, masked)?;
        self.forward_with_context(x_t, &temb, &ctx)
    }

    pub fn parameter_count(&self) -> usize {
        Module::parameter_count(self)
    }
}
