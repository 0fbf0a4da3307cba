//! Cosine noise schedule and the forward process on one image.

use tecswin::diffusion::{q_sample, NoiseSchedule};
use tecswin::shapes::ShapesDataset;
use tecswin::tensor::{Rng, Tensor};

fn main() -> tecswin::Result<()> {
    let sched = NoiseSchedule::cosine(1000)?;
    for t in [0, 1, 10, 100, 250, 500, 750, 999, 1000] {
        println!("t={t:4} alpha_bar={:.6}", sched.alpha_bar[t]);
    }
    let (x0, _) = ShapesDataset::new(16, 0).batch(1)?;
    let mut rng = Rng::new(1);
    for t in [10, 200, 600, 1000] {
        let eps = Tensor::randn(x0.shape(), 1.0, &mut rng);
        let xt = q_sample(&sched, &x0, t, &eps)?;
        let std = (xt.square().mean_all().item() as f64).sqrt();
        println!("t={t:4} rms(x_t)={std:.3}");
    }
    Ok(())
}
