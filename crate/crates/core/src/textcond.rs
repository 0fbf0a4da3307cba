//! Text encoder boundary, layer averaging and context assembly.

use tecswin_tensor::{splitmix64, Rng, Tensor};

use crate::error::{Error, Result};
use crate::nn::{impl_module, param, Linear};
use crate::swin::ContextBundle;

/// Per-layer hidden states of a text encoder for one prompt.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `L` tensors of shape `[Ltok, Denc]`.
    pub layer_outputs: Vec<Tensor>,
    /// `[Denc]`.
    pub pooled: Tensor,
}

impl EncoderOutput {
    pub fn num_layers(&self) -> usize {
        self.layer_outputs.len()
    }
}

/// Anything that maps UTF-8 text to per-layer token features.
pub trait TextEncoder {
    fn name(&self) -> &str;
    fn seq_len(&self) -> usize;
    fn dim(&self) -> usize;
    fn num_layers(&self) -> usize;
    fn encode(&self, prompt: &str) -> Result<EncoderOutput>;
}

/// Which encoder layers are averaged into the text embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerPreset {
    /// First layer and the last two.
    #[default]
    FirstAndLastTwo,
    /// First, 22nd and last layer.
    FirstTwentySecondLast,
}

impl LayerPreset {
    pub fn indices(self, layers: usize) -> Result<Vec<usize>> {
        let idx = match self {
            Self::FirstAndLastTwo if layers >= 2 => vec![0, layers - 2, layers - 1],
            Self::FirstTwentySecondLast if layers > 21 => vec![0, 21, layers - 1],
            _ => {
                return Err(Error::Text(format!(
                    "layer preset {self:?} needs more than {layers} layers"
                )))
            }
        };
        Ok(idx)
    }
}

/// Collapses whitespace runs and trims.
pub fn normalize_prompt(prompt: &str) -> String {
    prompt.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Deterministic stand-in encoder.
///
/// Words are hashed into a vocabulary; layer 0 is a seeded embedding of the
/// word id plus a sinusoidal position code, and layer `l` applies a fixed
/// seeded linear map followed by `tanh` to layer 0. Padding rows are zero.
#[derive(Clone, Debug)]
pub struct StubEncoder {
    pub seed: u64,
    pub vocab: u64,
    dim: usize,
    seq_len: usize,
    layer_maps: Vec<Vec<f32>>,
}

impl StubEncoder {
    pub fn new(seed: u64, dim: usize, seq_len: usize, layers: usize) -> Result<Self> {
        if layers < 2 || dim == 0 || seq_len == 0 {
            return Err(Error::Text(format!(
                "stub encoder needs >= 2 layers and positive sizes (got {layers}, {dim}, {seq_len})"
            )));
        }
        let mut rng = Rng::new(seed ^ 0x5445_5854);
        let std = 1.0 / (dim as f32).sqrt();
        let layer_maps = (1..layers).map(|_| rng.normal_vec(dim * dim, std)).collect();
        Ok(Self {
            seed,
            vocab: 1 << 20,
            dim,
            seq_len,
            layer_maps,
        })
    }

    pub fn token_id(&self, word: &str) -> u64 {
        // FNV-1a over the bytes, folded with the seed
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        splitmix64(h ^ self.seed) % self.vocab
    }

    pub fn tokenize(&self, prompt: &str) -> Result<Vec<u64>> {
        let norm = normalize_prompt(prompt);
        if norm.is_empty() {
            return Err(Error::Text("empty prompt".into()));
        }
        let mut ids = Vec::new();
        for word in norm.split(' ') {
            // scripts without spaces fall back to one token per character
            if word.is_ascii() {
                ids.push(self.token_id(word));
            } else {
                let mut buf = [0u8; 4];
                ids.extend(word.chars().map(|c| self.token_id(c.encode_utf8(&mut buf))));
            }
        }
        ids.truncate(self.seq_len);
        Ok(ids)
    }

    fn embed(&self, id: u64, pos: usize) -> Vec<f32> {
        let mut rng = Rng::new(splitmix64(id.wrapping_add(self.seed.rotate_left(17))));
        let mut v = rng.normal_vec(self.dim, 1.0);
        let pe = sinusoid(pos as f64, self.dim);
        for (a, b) in v.iter_mut().zip(pe) {
            *a += 0.5 * b;
        }
        v
    }
}

impl TextEncoder for StubEncoder {
    fn name(&self) -> &str {
        "stub"
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn num_layers(&self) -> usize {
        self.layer_maps.len() + 1
    }

    fn encode(&self, prompt: &str) -> Result<EncoderOutput> {
        let ids = self.tokenize(prompt)?;
        let (l, d) = (self.seq_len, self.dim);
        let mut base = vec![0.0f32; l * d];
        for (pos, id) in ids.iter().enumerate() {
            base[pos * d..(pos + 1) * d].copy_from_slice(&self.embed(*id, pos));
        }
        let mut layers = vec![Tensor::from_vec(base.clone(), &[l, d])?];
        for map in &self.layer_maps {
            let mut out = vec![0.0f32; l * d];
            for row in 0..ids.len() {
                let x = &base[row * d..(row + 1) * d];
                for j in 0..d {
                    let s: f32 = (0..d).map(|i| x[i] * map[i * d + j]).sum();
                    out[row * d + j] = s.tanh();
                }
            }
            layers.push(Tensor::from_vec(out, &[l, d])?);
        }
        let last = layers.last().unwrap().data();
        let n = ids.len() as f32;
        let pooled = (0..d)
            .map(|j| (0..ids.len()).map(|r| last[r * d + j]).sum::<f32>() / n)
            .collect();
        Ok(EncoderOutput {
            layer_outputs: layers,
            pooled: Tensor::from_vec(pooled, &[d])?,
        })
    }
}

/// Mean of the selected layers, `[Ltok, Denc]`.
pub fn average_layers(out: &EncoderOutput, indices: &[usize]) -> Result<Tensor> {
    if indices.is_empty() {
        return Err(Error::Text("no layers selected".into()));
    }
    let first = out
        .layer_outputs
        .first()
        .ok_or_else(|| Error::Text("encoder produced no layers".into()))?;
    let mut acc = vec![0.0f32; first.numel()];
    for &i in indices {
        let layer = out.layer_outputs.get(i).ok_or_else(|| {
            Error::Text(format!("layer {i} out of range for {} layers", out.num_layers()))
        })?;
        for (a, v) in acc.iter_mut().zip(layer.data()) {
            *a += v;
        }
    }
    let n = indices.len() as f32;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(Tensor::from_vec(acc, first.shape())?)
}

/// Encodes each prompt and stacks the averaged layers into `[B, Ltok, Denc]`.
pub fn encode_batch(
    encoder: &dyn TextEncoder,
    prompts: &[&str],
    preset: LayerPreset,
) -> Result<Tensor> {
    let idx = preset.indices(encoder.num_layers())?;
    let mut rows = Vec::with_capacity(prompts.len());
    for p in prompts {
        rows.push(average_layers(&encoder.encode(p)?, &idx)?);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    let (l, d) = (encoder.seq_len(), encoder.dim());
    Ok(Tensor::concat(&refs, 0)?.reshape(&[prompts.len(), l, d])?)
}

fn sinusoid(t: f64, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut v = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        v[i] = (t * freq).sin() as f32;
        v[half + i] = (t * freq).cos() as f32;
    }
    v
}

/// Raw sinusoidal code of a timestep; `dim` must be even.
pub fn timestep_sinusoid(t: usize, dim: usize) -> Result<Vec<f32>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("time embedding width {dim} must be even")));
    }
    Ok(sinusoid(t as f64, dim))
}

/// Sinusoid followed by `Linear -> SiLU -> Linear`.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub fc1: Linear,
    pub fc2: Linear,
}
impl_module!(TimeEmbedding { fc1, fc2 });

impl TimeEmbedding {
    pub fn new(dim: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(dim, dim, rng),
            fc2: Linear::new(dim, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.fc1.in_features()
    }

    /// `[B, D]` for timesteps `t`.
    pub fn forward(&self, t: &[usize]) -> Result<Tensor> {
        let d = self.dim();
        let mut raw = Vec::with_capacity(t.len() * d);
        for &ti in t {
            raw.extend(timestep_sinusoid(ti, d)?);
        }
        let x = Tensor::from_vec(raw, &[t.len(), d])?;
        Ok(self.fc2.forward(&self.fc1.forward(&x)?.silu())?)
    }
}

/// Projects encoder features into context tokens and appends time tokens.
#[derive(Clone, Debug)]
pub struct ContextAssembler {
    /// `Denc -> D` on every token.
    pub feature_proj: Linear,
    /// `Ltok -> Nctx` along the token axis.
    pub token_proj: Linear,
    /// `[Nctx, D]`, used for masked prompts.
    pub null_tokens: Tensor,
}
impl_module!(ContextAssembler { feature_proj, token_proj, null_tokens });

impl ContextAssembler {
    pub fn new(text_tokens: usize, text_dim: usize, ctx_tokens: usize, ctx_dim: usize, rng: &mut Rng) -> Self {
        Self {
            feature_proj: Linear::new(text_dim, ctx_dim, rng),
            token_proj: Linear::new(text_tokens, ctx_tokens, rng),
            null_tokens: param(Tensor::randn(&[ctx_tokens, ctx_dim], 0.02, rng)),
        }
    }

    pub fn ctx_tokens(&self) -> usize {
        self.null_tokens.dim(0)
    }

    pub fn ctx_dim(&self) -> usize {
        self.null_tokens.dim(1)
    }

    /// Text tokens only, `[B, Nctx, D]`.
    pub fn project(&self, text: &Tensor) -> Result<Tensor> {
        if text.rank() != 3 {
            return Err(Error::Config(format!("text features must be [B, L, D], got {:?}", text.shape())));
        }
        let feats = self.feature_proj.forward(text)?;
        let mixed = self.token_proj.forward(&feats.transpose(1, 2)?)?;
        Ok(mixed.transpose(1, 2)?)
    }

    /// `text: [B, Ltok, Denc]`, `temb: [B, D]`; masked rows take the null
    /// block.
    pub fn forward(&self, text: &Tensor, temb: &Tensor, masked: &[bool]) -> Result<ContextBundle> {
        let b = text.dim(0);
        if masked.len() != b || temb.dim(0) != b {
            return Err(Error::Config(format!(
                "batch mismatch: text {b}, time {}, mask {}",
                temb.dim(0),
                masked.len()
            )));
        }
        let (n, d) = (self.ctx_tokens(), self.ctx_dim());
        let tokens = if masked.iter().all(|m| !m) {
            self.project(text)?
        } else {
            let null = self.null_tokens.reshape(&[1, n, d])?;
            let projected = if masked.iter().all(|m| *m) { None } else { Some(self.project(text)?) };
            let rows: Vec<Tensor> = masked
                .iter()
                .enumerate()
                .map(|(i, &m)| match (&projected, m) {
                    (Some(p), false) => Ok(p.narrow(0, i, 1)?),
                    _ => Ok(null.clone()),
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = rows.iter().collect();
            Tensor::concat(&refs, 0)?
        };
        self.finish(tokens, temb, masked.to_vec())
    }

    /// The bundle every fully masked batch produces.
    pub fn null_bundle(&self, temb: &Tensor) -> Result<ContextBundle> {
        let b = temb.dim(0);
        let null = self.null_tokens.reshape(&[1, self.ctx_tokens(), self.ctx_dim()])?;
        let rows = vec![&null; b];
        self.finish(Tensor::concat(&rows, 0)?, temb, vec![true; b])
    }

    fn finish(&self, tokens: Tensor, temb: &Tensor, masked: Vec<bool>) -> Result<ContextBundle> {
        let (b, d) = (temb.dim(0), temb.dim(1));
        let pooled = tokens.mean_axis(1, false)?;
        let t1 = temb.reshape(&[b, 1, d])?;
        let t2 = temb.add(&pooled)?.reshape(&[b, 1, d])?;
        Ok(ContextBundle {
            tokens: Tensor::concat(&[&tokens, &t1, &t2], 1)?,
            pooled,
            masked,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_is_deterministic_and_padded() {
        let enc = StubEncoder::new(3, 8, 6, 4).unwrap();
        let a = enc.encode("a red circle").unwrap();
        let b = enc.encode("a  red circle ").unwrap();
        assert_eq!(a.num_layers(), 4);
        for (x, y) in a.layer_outputs.iter().zip(&b.layer_outputs) {
            assert_eq!(x.to_vec(), y.to_vec());
            assert_eq!(x.shape(), &[6, 8]);
        }
        // rows past the third word are padding
        assert!(a.layer_outputs[0].data()[3 * 8..].iter().all(|v| *v == 0.0));
        assert!(enc.encode("   ").is_err());
    }

    #[test]
    fn one_character_changes_a_row() {
        let enc = StubEncoder::new(0, 8, 4, 2).unwrap();
        let a = enc.encode("a red circle").unwrap();
        let b = enc.encode("a red circlf").unwrap();
        let (ra, rb) = (a.layer_outputs[0].data(), b.layer_outputs[0].data());
        assert_eq!(ra[..16], rb[..16]);
        assert_ne!(ra[16..24], rb[16..24]);
    }

    #[test]
    fn chinese_prompts_tokenize_per_character() {
        let enc = StubEncoder::new(0, 4, 8, 2).unwrap();
        assert_eq!(enc.tokenize("一只猫").unwrap().len(), 3);
    }

    #[test]
    fn layers_differ() {
        let enc = StubEncoder::new(1, 8, 4, 3).unwrap();
        let out = enc.encode("hello world").unwrap();
        assert_ne!(out.layer_outputs[1].to_vec(), out.layer_outputs[2].to_vec());
    }

    #[test]
    fn presets() {
        assert_eq!(LayerPreset::FirstAndLastTwo.indices(24).unwrap(), [0, 22, 23]);
        assert_eq!(LayerPreset::FirstTwentySecondLast.indices(24).unwrap(), [0, 21, 23]);
        assert!(LayerPreset::FirstTwentySecondLast.indices(12).is_err());
    }

    #[test]
    fn odd_time_width_rejected() {
        assert!(timestep_sinusoid(3, 7).is_err());
        assert_eq!(timestep_sinusoid(0, 4).unwrap(), [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn context_length_is_tokens_plus_two() {
        let mut rng = Rng::new(0);
        let asm = ContextAssembler::new(16, 32, 16, 64, &mut rng);
        let text = Tensor::randn(&[2, 16, 32], 1.0, &mut rng);
        let temb = Tensor::randn(&[2, 64], 1.0, &mut rng);
        let ctx = asm.forward(&text, &temb, &[false, true]).unwrap();
        assert_eq!(ctx.tokens.shape(), &[2, 18, 64]);
        assert_eq!(ctx.pooled.shape(), &[2, 64]);
    }
}
