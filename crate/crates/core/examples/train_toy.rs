//! Trains the toy model on the four-class shapes and reports how often
//! guided samples land in their prompt's class.
//!
//! `cargo run --release --example train_toy -- 300 runs/example`

use std::path::PathBuf;

use tecswin::run::{run_train, RunConfig, SampleEvaluator};
use tecswin::shapes::{ShapeClass, ShapeClassifier, ShapesDataset};

fn main() -> tecswin::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| "runs/example".into());
    let mut cfg = RunConfig::default();
    cfg.train.steps = steps;
    cfg.output_dir = out;
    cfg.eval.samples = 32;
    let summary = run_train(&cfg, None)?;
    println!(
        "{} steps, loss {:.4} -> {:.4}, checkpoint {}",
        summary.steps,
        summary.first_loss,
        summary.last_loss,
        summary.checkpoint.display()
    );

    let model = tecswin::run::load_model(&cfg.model, &summary.checkpoint)?;
    let eval = SampleEvaluator::for_shapes(&cfg, &model)?;
    let (held, labels) = ShapesDataset::new(cfg.model.image_size, 99).balanced(100)?;
    let oracle = ShapeClassifier::fit(&held, &labels)?;
    let wanted: Vec<ShapeClass> = (0..cfg.eval.samples).map(|i| ShapeClass::ALL[i % 4]).collect();
    let schedule = cfg.sampling.schedule()?;
    for s in [1.0, cfg.sampling.cond_scale] {
        let imgs = eval.samples(&schedule, s)?;
        println!("cond-scale {s}: class accuracy {:.3}", oracle.accuracy(&imgs, &wanted));
    }
    Ok(())
}
