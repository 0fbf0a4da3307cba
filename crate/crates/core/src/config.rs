//! Architecture description and its presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full architectural description of the denoiser.
///
/// Encoder stage `i` runs at `image_size / 2^i` with `base_channels * 2^i`
/// channels; the decoder mirrors it and a middle group sits at the deepest
/// resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    /// Blocks per encoder stage; the decoder uses the same list.
    pub depths: Vec<usize>,
    pub middle_depth: usize,
    pub window: usize,
    pub head_dim: usize,
    pub mlp_ratio_self: usize,
    pub mlp_ratio_cross: usize,
    pub use_relative_bias: bool,
    pub scale_shift_variant: u8,
    /// Width of context tokens and of the time embedding.
    pub ctx_dim: usize,
    /// Projected text tokens per sample (two time tokens are appended).
    pub ctx_tokens: usize,
    /// Sequence length produced by the text encoder.
    pub text_tokens: usize,
    /// Feature width produced by the text encoder.
    pub text_dim: usize,
}

/// Geometry of one resolution level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageLayout {
    pub resolution: usize,
    pub channels: usize,
    /// Effective window: the configured window, clamped to the resolution.
    pub window: usize,
    /// W-MSA/SW-MSA pairs with cross-attention after each SW-MSA. When
    /// false the stage is window-sized: W-MSA only, cross-attention after
    /// every block.
    pub shifted: bool,
    pub heads: usize,
}

impl ModelConfig {
    /// 64x64 configuration with a 128-channel first stage and [2,2,18,2]
    /// blocks.
    pub fn full() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            base_channels: 128,
            depths: vec![2, 2, 18, 2],
            middle_depth: 2,
            window: 8,
            head_dim: 32,
            mlp_ratio_self: 4,
            mlp_ratio_cross: 2,
            use_relative_bias: true,
            scale_shift_variant: 4,
            ctx_dim: 512,
            ctx_tokens: 256,
            text_tokens: 512,
            text_dim: 1024,
        }
    }

    /// Desk-scale 16x16 configuration: two levels of 16 and 32 channels,
    /// small enough to train on one CPU core in about ten minutes.
    pub fn toy() -> Self {
        Self {
            image_size: 16,
            in_channels: 3,
            base_channels: 16,
            depths: vec![2, 2],
            middle_depth: 2,
            window: 4,
            head_dim: 16,
            mlp_ratio_self: 4,
            mlp_ratio_cross: 2,
            use_relative_bias: true,
            scale_shift_variant: 4,
            ctx_dim: 64,
            ctx_tokens: 16,
            text_tokens: 16,
            text_dim: 32,
        }
    }

    /// 8x8, 8-channel configuration small enough for finite differences.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            in_channels: 3,
            base_channels: 8,
            depths: vec![2, 2, 2, 2],
            middle_depth: 2,
            window: 2,
            head_dim: 8,
            mlp_ratio_self: 4,
            mlp_ratio_cross: 2,
            use_relative_bias: true,
            scale_shift_variant: 4,
            ctx_dim: 8,
            ctx_tokens: 4,
            text_tokens: 6,
            text_dim: 8,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    /// Context length seen by attention: text tokens plus two time tokens.
    pub fn context_len(&self) -> usize {
        self.ctx_tokens + 2
    }

    pub fn stage(&self, level: usize) -> StageLayout {
        let resolution = self.image_size >> level;
        let channels = self.base_channels << level;
        let window = self.window.min(resolution);
        StageLayout {
            resolution,
            channels,
            window,
            shifted: resolution > self.window,
            heads: channels / self.head_dim.max(1),
        }
    }

    pub fn deepest(&self) -> StageLayout {
        self.stage(self.num_stages() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depths.is_empty() {
            return fail("depths must name at least one stage".into());
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.window == 0 || self.head_dim == 0 {
            return fail("channel, window and head sizes must be positive".into());
        }
        if self.mlp_ratio_self < 1 || self.mlp_ratio_cross < 1 {
            return fail("mlp ratios must be >= 1".into());
        }
        if !(1..=10).contains(&self.scale_shift_variant) {
            return Err(Error::InvalidVariant(self.scale_shift_variant));
        }
        if self.ctx_dim == 0 || self.ctx_tokens == 0 || self.text_tokens == 0 || self.text_dim == 0 {
            return fail("context and text sizes must be positive".into());
        }
        if self.ctx_dim % 2 != 0 {
            return fail(format!("ctx_dim {} must be even (sinusoidal time embedding)", self.ctx_dim));
        }
        let levels = self.num_stages() - 1;
        if self.image_size == 0 || self.image_size % (1 << levels) != 0 {
            return fail(format!(
                "image_size {} not divisible by 2^{levels}",
                self.image_size
            ));
        }
        for level in 0..self.num_stages() {
            let s = self.stage(level);
            if s.resolution % s.window != 0 {
                return fail(format!(
                    "stage {level}: resolution {} not divisible by window {}",
                    s.resolution, s.window
                ));
            }
            if s.channels % self.head_dim != 0 {
                return fail(format!(
                    "stage {level}: {} channels not divisible by head_dim {}",
                    s.channels, self.head_dim
                ));
            }
            if s.shifted && self.depths[level] % 2 != 0 {
                return fail(format!(
                    "stage {level}: shifted stages need an even block count, got {}",
                    self.depths[level]
                ));
            }
        }
        Ok(())
    }
}
