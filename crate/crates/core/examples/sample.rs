//! Samples images for a prompt and writes PNGs plus a grid.
//!
//! `cargo run --release --example sample -- "a red circle" runs/example/model.ckpt`
//! Without a checkpoint the weights are random and so are the images.

use std::path::Path;

use tecswin::run::{load_model, run_sample, RunConfig};
use tecswin::schedule::StageSchedule;
use tecswin::TecSwinModel;

fn main() -> tecswin::Result<()> {
    let mut args = std::env::args().skip(1);
    let prompt = args.next().unwrap_or_else(|| "a red circle".into());
    let cfg = RunConfig::default();
    let model = match args.next() {
        Some(p) => load_model(&cfg.model, p)?,
        None => TecSwinModel::new(cfg.model.clone(), 0)?,
    };
    let schedule = StageSchedule::uniform(cfg.sampling.t_max, 20)?;
    let out = Path::new("samples/example");
    let imgs = run_sample(&cfg, &model, &prompt, 4, &schedule, cfg.sampling.cond_scale, 0, out)?;
    println!("{:?} written to {}", imgs.shape(), out.display());
    Ok(())
}
