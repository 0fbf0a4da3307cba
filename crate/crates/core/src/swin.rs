//! Shifted-window transformer blocks with context conditioning.
//!
//! Three routes carry the prompt into the image features:
//!
//! * window attention whose keys and values are extended with projected
//!   context tokens, so every window also attends to the prompt;
//! * cross-attention layers (queries from the image, keys/values from the
//!   context) after each SW-MSA, or after each W-MSA in window-sized stages;
//! * a FiLM-style `x * (scale + 1) + shift` modulation driven by the time
//!   embedding plus the pooled context vector.

use std::sync::Arc;

use tecswin_tensor::{Rng, Tensor};

use crate::config::{ModelConfig, StageLayout};
use crate::error::{Error, Result};
use crate::nn::{impl_module, param, LayerNorm, Linear, Mlp};

/// Placement of the scale-shift modulation within a block.
///
/// Ids follow the ablation table of the architecture study; 4 is the
/// default (`short-cut -> Norm -> scale-shift -> GeLU -> WA`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleShiftVariant {
    /// 1: after the attention sublayer, outside the residual.
    AfterAttention,
    /// 2: scale-shift, GeLU, Norm, WA inside the residual.
    PreGeluNorm,
    /// 3: GeLU, Norm, WA inside the residual; no modulation.
    GeluNormOnly,
    /// 4: Norm, scale-shift, GeLU, WA inside the residual.
    NormScaleShiftGelu,
    /// 5: Norm, scale-shift, WA inside the residual.
    NormScaleShift,
    /// 6: Norm, scale-shift, GeLU, Norm, WA inside the residual.
    NormScaleShiftGeluNorm,
    /// 7: after the whole block, outside the shortcut.
    AfterBlock,
    /// 8 and 9: every LayerNorm replaced by Norm + scale-shift + GeLU.
    ReplaceNorms(u8),
    /// 10: Norm, scale-shift, SiLU, WA inside the residual.
    NormScaleShiftSilu,
}

impl ScaleShiftVariant {
    pub fn from_id(id: u8) -> Result<Self> {
        Ok(match id {
            1 => Self::AfterAttention,
            2 => Self::PreGeluNorm,
            3 => Self::GeluNormOnly,
            4 => Self::NormScaleShiftGelu,
            5 => Self::NormScaleShift,
            6 => Self::NormScaleShiftGeluNorm,
            7 => Self::AfterBlock,
            8 | 9 => Self::ReplaceNorms(id),
            10 => Self::NormScaleShiftSilu,
            other => return Err(Error::InvalidVariant(other)),
        })
    }

    pub fn id(self) -> u8 {
        match self {
            Self::AfterAttention => 1,
            Self::PreGeluNorm => 2,
            Self::GeluNormOnly => 3,
            Self::NormScaleShiftGelu => 4,
            Self::NormScaleShift => 5,
            Self::NormScaleShiftGeluNorm => 6,
            Self::AfterBlock => 7,
            Self::ReplaceNorms(id) => id,
            Self::NormScaleShiftSilu => 10,
        }
    }
}

impl Default for ScaleShiftVariant {
    fn default() -> Self {
        Self::NormScaleShiftGelu
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    pub window: usize,
    pub mlp_ratio_self: usize,
    pub mlp_ratio_cross: usize,
    pub use_relative_bias: bool,
}

impl AttentionConfig {
    pub fn for_stage(cfg: &ModelConfig, stage: &StageLayout) -> Self {
        Self {
            num_heads: stage.heads,
            head_dim: cfg.head_dim,
            window: stage.window,
            mlp_ratio_self: cfg.mlp_ratio_self,
            mlp_ratio_cross: cfg.mlp_ratio_cross,
            use_relative_bias: cfg.use_relative_bias,
        }
    }

    pub fn channels(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

/// Text and time context for a batch.
#[derive(Clone, Debug)]
pub struct ContextBundle {
    /// `[B, Lctx, D]`: projected text tokens followed by two time tokens.
    pub tokens: Tensor,
    /// `[B, D]`: mean of the projected text tokens.
    pub pooled: Tensor,
    pub masked: Vec<bool>,
}

impl ContextBundle {
    pub fn batch(&self) -> usize {
        self.tokens.dim(0)
    }

    pub fn len(&self) -> usize {
        self.tokens.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn split_last(x: &Tensor, parts: usize) -> Result<Vec<Tensor>> {
    let axis = x.rank() - 1;
    let c = x.dim(axis) / parts;
    (0..parts).map(|i| Ok(x.narrow(axis, i * c, c)?)).collect()
}

/// Multi-head split: `[.., L, heads*hd] -> [.., heads, L, hd]`.
fn to_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let r = x.rank();
    let mut shape = x.shape().to_vec();
    let c = shape[r - 1];
    shape[r - 1] = heads;
    shape.push(c / heads);
    let y = x.reshape(&shape)?;
    let mut perm: Vec<usize> = (0..r - 2).collect();
    perm.extend([r - 1, r - 2, r]);
    Ok(y.permute(&perm)?)
}

/// Inverse of [`to_heads`].
fn from_heads(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    let mut perm: Vec<usize> = (0..r - 3).collect();
    perm.extend([r - 2, r - 3, r - 1]);
    let y = x.permute(&perm)?;
    let mut shape = y.shape()[..r - 2].to_vec();
    shape.push(x.dim(r - 3) * x.dim(r - 1));
    Ok(y.reshape(&shape)?)
}

/// Index into the `(2w-1)^2` relative-offset table for every token pair of
/// a `w x w` window.
pub fn relative_position_index(win: usize) -> Vec<usize> {
    let t = win * win;
    let span = 2 * win - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / win, i % win);
        for j in 0..t {
            let (yj, xj) = (j / win, j % win);
            let dy = yi + win - 1 - yj;
            let dx = xi + win - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Additive SW-MSA mask `[nW, T, T]`: 0 within a pre-shift region,
/// `-inf` across regions.
pub fn shift_attention_mask(h: usize, w: usize, win: usize, shift: usize) -> Result<Tensor> {
    let region = |v: usize, len: usize| -> usize {
        if v < len - win {
            0
        } else if v < len - shift {
            1
        } else {
            2
        }
    };
    let mut labels = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            labels[y * w + x] = (region(y, h) * 3 + region(x, w)) as f32;
        }
    }
    let img = Tensor::from_vec(labels, &[1, h, w, 1])?;
    let windows = img.window_partition(win)?;
    let (nw, t) = (windows.dim(0), windows.dim(1));
    let lab = windows.data();
    let mut mask = vec![0.0f32; nw * t * t];
    for n in 0..nw {
        for i in 0..t {
            for j in 0..t {
                if lab[n * t + i] != lab[n * t + j] {
                    mask[(n * t + i) * t + j] = f32::NEG_INFINITY;
                }
            }
        }
    }
    Ok(Tensor::from_vec(mask, &[nw, t, t])?)
}

/// Window multi-head self-attention whose keys/values are extended with
/// the context tokens.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub ctx_kv: Linear,
    pub proj: Linear,
    pub relative_bias: Option<Tensor>,
    pub cfg: AttentionConfig,
    bias_index: Arc<Vec<u32>>,
}
impl_module!(WindowAttention { qkv, ctx_kv, proj, relative_bias });

/// Output of [`WindowAttention::forward_with_weights`].
pub struct AttentionOutput {
    pub out: Tensor,
    /// `[B, nW, heads, T, T + Lctx]`; rows sum to one.
    pub weights: Tensor,
}

impl WindowAttention {
    pub fn new(cfg: AttentionConfig, ctx_dim: usize, rng: &mut Rng) -> Self {
        let c = cfg.channels();
        let win = cfg.window;
        let span = 2 * win - 1;
        let heads = cfg.num_heads;
        let t = win * win;
        let rel = relative_position_index(win);
        // gather layout: [heads, T, T] from the [(2w-1)^2, heads] table
        let mut bias_index = Vec::with_capacity(heads * t * t);
        for h in 0..heads {
            for &r in &rel {
                bias_index.push((r * heads + h) as u32);
            }
        }
        Self {
            qkv: Linear::new(c, 3 * c, rng),
            ctx_kv: Linear::new(ctx_dim, 2 * c, rng),
            proj: Linear::new(c, c, rng),
            relative_bias: cfg
                .use_relative_bias
                .then(|| param(Tensor::randn(&[span * span, heads], 0.02, rng))),
            cfg,
            bias_index: Arc::new(bias_index),
        }
    }

    /// `[heads, T, T]` bias for the image keys; context keys get none.
    pub fn relative_bias_matrix(&self) -> Result<Option<Tensor>> {
        let t = self.cfg.window * self.cfg.window;
        match &self.relative_bias {
            Some(table) => Ok(Some(
                table.gather_flat(self.bias_index.clone(), &[self.cfg.num_heads, t, t])?,
            )),
            None => Ok(None),
        }
    }

    pub fn forward(
        &self,
        x_windows: &Tensor,
        batch: usize,
        ctx: Option<&Tensor>,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        Ok(self.forward_with_weights(x_windows, batch, ctx, mask)?.out)
    }

    /// `x_windows: [B*nW, T, C]` with the windows of each image contiguous;
    /// `ctx: [B, Lctx, D]`; `mask: [nW, T, T]` additive.
    pub fn forward_with_weights(
        &self,
        x_windows: &Tensor,
        batch: usize,
        ctx: Option<&Tensor>,
        mask: Option<&Tensor>,
    ) -> Result<AttentionOutput> {
        let heads = self.cfg.num_heads;
        let hd = self.cfg.head_dim;
        let c = self.cfg.channels();
        let [n, t, cx] = x_windows.shape() else {
            return Err(Error::Config(format!(
                "window attention expects [N, T, C], got {:?}",
                x_windows.shape()
            )));
        };
        let (n, t, cx) = (*n, *t, *cx);
        if cx != c {
            return Err(Error::Config(format!(
                "channels {cx} != heads {heads} x head_dim {hd}"
            )));
        }
        if batch == 0 || n % batch != 0 {
            return Err(Error::Config(format!("{n} windows for batch {batch}")));
        }
        let nw = n / batch;
        let x = x_windows.reshape(&[batch, nw, t, c])?;
        let qkv = self.qkv.forward(&x)?;
        let parts = split_last(&qkv, 3)?;
        let q = to_heads(&parts[0], heads)?.mul_scalar((hd as f32).powf(-0.5));
        let k = to_heads(&parts[1], heads)?;
        let v = to_heads(&parts[2], heads)?;

        // [B, nW, h, T, T]
        let mut logits = q.matmul(&k.transpose(3, 4)?)?;
        if let Some(bias) = self.relative_bias_matrix()? {
            if bias.dim(1) != t {
                return Err(Error::Config(format!(
                    "window of {t} tokens does not match configured window {}",
                    self.cfg.window
                )));
            }
            logits = logits.add(&bias.reshape(&[1, 1, heads, t, t])?)?;
        }
        if let Some(mask) = mask {
            logits = logits.add(&mask.reshape(&[1, nw, 1, t, t])?)?;
        }

        let ctx_kv = match ctx {
            Some(ctx) if ctx.dim(1) > 0 => {
                if ctx.dim(0) != batch {
                    return Err(Error::Config(format!(
                        "context batch {} != image batch {batch}",
                        ctx.dim(0)
                    )));
                }
                let kv = self.ctx_kv.forward(ctx)?;
                let kv = split_last(&kv, 2)?;
                let l = ctx.dim(1);
                // [B, 1, h, L, hd]
                let kc = to_heads(&kv[0], heads)?.reshape(&[batch, 1, heads, l, hd])?;
                let vc = to_heads(&kv[1], heads)?.reshape(&[batch, 1, heads, l, hd])?;
                Some((kc, vc, l))
            }
            _ => None,
        };

        let (weights, out) = match &ctx_kv {
            Some((kc, vc, l)) => {
                let logits_c = q.matmul(&kc.transpose(3, 4)?)?;
                let all = Tensor::concat(&[&logits, &logits_c], 4)?;
                let weights = all.softmax_last()?;
                let a_img = weights.narrow(4, 0, t)?;
                let a_ctx = weights.narrow(4, t, *l)?;
                let out = a_img.matmul(&v)?.add(&a_ctx.matmul(vc)?)?;
                (weights, out)
            }
            None => {
                let weights = logits.softmax_last()?;
                let out = weights.matmul(&v)?;
                (weights, out)
            }
        };
        let out = from_heads(&out)?.reshape(&[n, t, c])?;
        Ok(AttentionOutput {
            out: self.proj.forward(&out)?,
            weights,
        })
    }
}

/// Cross-attention from image tokens to context tokens, then an MLP, each
/// with a pre-norm residual.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub kv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
}
impl_module!(CrossAttention { norm1, q, kv, proj, norm2, mlp });

impl CrossAttention {
    pub fn new(cfg: &AttentionConfig, ctx_dim: usize, rng: &mut Rng) -> Self {
        let c = cfg.channels();
        Self {
            norm1: LayerNorm::new(c),
            q: Linear::new(c, c, rng),
            kv: Linear::new(ctx_dim, 2 * c, rng),
            proj: Linear::new(c, c, rng),
            norm2: LayerNorm::new(c),
            mlp: Mlp::new(c, cfg.mlp_ratio_cross, rng),
            heads: cfg.num_heads,
        }
    }

    /// Attention term alone: `x: [B, L, C]` (already normalised).
    pub fn attend(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        if x.rank() != 3 || ctx.rank() != 3 || x.dim(0) != ctx.dim(0) {
            return Err(Error::Config(format!(
                "cross attention shapes {:?} / {:?}",
                x.shape(),
                ctx.shape()
            )));
        }
        let c = x.dim(2);
        let hd = c / self.heads;
        let q = to_heads(&self.q.forward(x)?, self.heads)?.mul_scalar((hd as f32).powf(-0.5));
        let kv = split_last(&self.kv.forward(ctx)?, 2)?;
        let k = to_heads(&kv[0], self.heads)?;
        let v = to_heads(&kv[1], self.heads)?;
        let a = q.matmul(&k.transpose(2, 3)?)?.softmax_last()?;
        let out = from_heads(&a.matmul(&v)?)?;
        self.proj.forward(&out).map_err(Into::into)
    }

    /// `x: [B, L, C]`, `ctx: [B, Lctx, D]`.
    pub fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let x = x.add(&self.attend(&self.norm1.forward(x)?, ctx)?)?;
        Ok(x.add(&self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

/// `x * (scale + 1) + shift` with `scale`/`shift` broadcast over the
/// spatial axes.
pub fn modulate(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    Ok(x.mul(&scale.add_scalar(1.0))?.add(shift)?)
}

/// Attention sublayer of a block under a scale-shift placement.
///
/// `inner` is the (window) attention; `norm` is the block's pre-attention
/// LayerNorm and `extra_norm` the second norm used by variant 6. Variant 7
/// modulates after the whole block, so its sublayer here is the plain
/// pre-norm residual; variants 8/9 share variant 4's sublayer and differ
/// in the MLP path.
pub fn scale_shift_apply(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    variant: ScaleShiftVariant,
    norm: &LayerNorm,
    extra_norm: &LayerNorm,
    inner: &dyn Fn(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    use ScaleShiftVariant::*;
    let residual = |h: Tensor| -> Result<Tensor> { Ok(x.add(&inner(&h)?)?) };
    match variant {
        AfterAttention => modulate(&residual(norm.forward(x)?)?, scale, shift),
        PreGeluNorm => residual(norm.forward(&modulate(x, scale, shift)?.gelu())?),
        GeluNormOnly => residual(norm.forward(&x.gelu())?),
        NormScaleShiftGelu | ReplaceNorms(_) => {
            residual(modulate(&norm.forward(x)?, scale, shift)?.gelu())
        }
        NormScaleShift => residual(modulate(&norm.forward(x)?, scale, shift)?),
        NormScaleShiftGeluNorm => {
            residual(extra_norm.forward(&modulate(&norm.forward(x)?, scale, shift)?.gelu())?)
        }
        AfterBlock => residual(norm.forward(x)?),
        NormScaleShiftSilu => residual(modulate(&norm.forward(x)?, scale, shift)?.silu()),
    }
}

/// One W-MSA or SW-MSA block, optionally followed by cross-attention.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub norm_extra: Option<LayerNorm>,
    pub scale_shift: Option<Linear>,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub cross: Option<CrossAttention>,
    pub shifted: bool,
    pub variant: ScaleShiftVariant,
}
impl_module!(SwinBlock { norm1, norm_extra, scale_shift, attn, norm2, mlp, cross });

impl SwinBlock {
    pub fn new(
        cfg: AttentionConfig,
        ctx_dim: usize,
        shifted: bool,
        with_cross: bool,
        variant: ScaleShiftVariant,
        rng: &mut Rng,
    ) -> Self {
        let c = cfg.channels();
        Self {
            norm1: LayerNorm::new(c),
            norm_extra: (variant == ScaleShiftVariant::NormScaleShiftGeluNorm)
                .then(|| LayerNorm::new(c)),
            scale_shift: (variant != ScaleShiftVariant::GeluNormOnly)
                .then(|| Linear::new(ctx_dim, 2 * c, rng)),
            attn: WindowAttention::new(cfg, ctx_dim, rng),
            norm2: LayerNorm::new(c),
            mlp: Mlp::new(c, cfg.mlp_ratio_self, rng),
            cross: with_cross.then(|| CrossAttention::new(&cfg, ctx_dim, rng)),
            shifted,
            variant,
        }
    }

    pub fn window(&self) -> usize {
        self.attn.cfg.window
    }

    pub fn shift_size(&self) -> usize {
        if self.shifted {
            self.window() / 2
        } else {
            0
        }
    }

    /// Window attention over a full `[B,H,W,C]` map, including the cyclic
    /// shift and mask for SW-MSA.
    pub fn spatial_attention(&self, h: &Tensor, ctx: Option<&Tensor>) -> Result<Tensor> {
        let [b, hh, ww, _] = *h.shape() else {
            return Err(Error::Config(format!("expected [B,H,W,C], got {:?}", h.shape())));
        };
        let win = self.window();
        if hh % win != 0 || ww % win != 0 {
            return Err(Error::Config(format!(
                "feature map {hh}x{ww} not divisible by window {win}"
            )));
        }
        let s = self.shift_size();
        let (shifted, mask) = if s > 0 {
            (
                h.cyclic_shift(-(s as isize), -(s as isize))?,
                Some(shift_attention_mask(hh, ww, win, s)?),
            )
        } else {
            (h.clone(), None)
        };
        let windows = shifted.window_partition(win)?;
        let out = self.attn.forward(&windows, b, ctx, mask.as_ref())?;
        let out = out.window_reverse(win, hh, ww)?;
        if s > 0 {
            Ok(out.cyclic_shift(s as isize, s as isize)?)
        } else {
            Ok(out)
        }
    }

    /// `(scale, shift)`, each `[B,1,1,C]`, from the conditioning vector.
    pub fn modulation(&self, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = self.norm1.gamma.numel();
        let b = cond.dim(0);
        match &self.scale_shift {
            Some(proj) => {
                let ss = proj.forward(&cond.silu())?;
                let parts = split_last(&ss, 2)?;
                Ok((parts[0].reshape(&[b, 1, 1, c])?, parts[1].reshape(&[b, 1, 1, c])?))
            }
            None => Ok((Tensor::zeros(&[b, 1, 1, c]), Tensor::zeros(&[b, 1, 1, c]))),
        }
    }

    /// `x: [B,H,W,C]`; `cond: [B,D]`; `ctx: [B,Lctx,D]`.
    pub fn forward(&self, x: &Tensor, cond: &Tensor, ctx: &ContextBundle) -> Result<Tensor> {
        let (scale, shift) = self.modulation(cond)?;
        let tokens = Some(&ctx.tokens);
        let extra = self.norm_extra.as_ref().unwrap_or(&self.norm1);
        let inner = |h: &Tensor| self.spatial_attention(h, tokens);
        let mut x = scale_shift_apply(x, &scale, &shift, self.variant, &self.norm1, extra, &inner)?;

        let mlp_in = match self.variant {
            ScaleShiftVariant::ReplaceNorms(_) => {
                modulate(&self.norm2.forward(&x)?, &scale, &shift)?.gelu()
            }
            _ => self.norm2.forward(&x)?,
        };
        x = x.add(&self.mlp.forward(&mlp_in)?)?;
        if self.variant == ScaleShiftVariant::AfterBlock {
            x = modulate(&x, &scale, &shift)?;
        }
        if let Some(cross) = &self.cross {
            let [b, h, w, c] = *x.shape() else { unreachable!() };
            let flat = x.reshape(&[b, h * w, c])?;
            x = cross.forward(&flat, &ctx.tokens)?.reshape(&[b, h, w, c])?;
        }
        Ok(x)
    }
}

/// Blocks of one resolution level.
#[derive(Clone, Debug)]
pub struct SwinStage {
    pub blocks: Vec<SwinBlock>,
    pub layout: StageLayout,
}
impl_module!(SwinStage { blocks });

impl SwinStage {
    /// Shifted stages alternate W-MSA/SW-MSA with cross-attention after each
    /// SW-MSA; window-sized stages use W-MSA only with cross-attention after
    /// every block.
    pub fn new(cfg: &ModelConfig, layout: StageLayout, depth: usize, rng: &mut Rng) -> Result<Self> {
        let variant = ScaleShiftVariant::from_id(cfg.scale_shift_variant)?;
        let acfg = AttentionConfig::for_stage(cfg, &layout);
        let blocks = (0..depth)
            .map(|i| {
                let odd = i % 2 == 1;
                let shifted = layout.shifted && odd;
                let with_cross = !layout.shifted || odd;
                SwinBlock::new(acfg, cfg.ctx_dim, shifted, with_cross, variant, rng)
            })
            .collect();
        Ok(Self { blocks, layout })
    }

    pub fn forward(&self, x: &Tensor, cond: &Tensor, ctx: &ContextBundle) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h, cond, ctx)?;
        }
        Ok(h)
    }
}
