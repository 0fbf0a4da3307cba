//! Window attention over image tokens with appended context tokens.

use tecswin::swin::{AttentionConfig, WindowAttention};
use tecswin::tensor::{Rng, Tensor};

fn main() -> tecswin::Result<()> {
    let mut rng = Rng::new(0);
    let cfg = AttentionConfig {
        num_heads: 2,
        head_dim: 8,
        window: 4,
        mlp_ratio_self: 4,
        mlp_ratio_cross: 2,
        use_relative_bias: true,
    };
    let attn = WindowAttention::new(cfg, 12, &mut rng);
    // two windows of 4x4 tokens, one batch item with 5 context tokens
    let x = Tensor::randn(&[2, 16, 16], 1.0, &mut rng);
    let ctx = Tensor::randn(&[1, 5, 12], 1.0, &mut rng);
    let out = attn.forward_with_weights(&x, 1, Some(&ctx), None)?;
    println!("output {:?} weights {:?}", out.out.shape(), out.weights.shape());
    let w = out.weights.data();
    let row = &w[..21];
    let on_ctx: f32 = row[16..].iter().sum();
    println!("first query: {:.3} of its attention on context", on_ctx);
    Ok(())
}
