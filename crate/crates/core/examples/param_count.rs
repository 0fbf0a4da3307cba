//! Parameter counts of the preset configurations.
//!
//! `cargo run --release --example param_count -- full` builds the full
//! 64x64 model (about 1.4 GB of f32 weights).

use tecswin::{ModelConfig, TecSwinModel};

fn main() -> tecswin::Result<()> {
    let which = std::env::args().nth(1).unwrap_or_else(|| "toy".into());
    let cfg = match which.as_str() {
        "full" => ModelConfig::full(),
        "tiny" => ModelConfig::tiny(),
        _ => ModelConfig::toy(),
    };
    for level in 0..cfg.num_stages() {
        let s = cfg.stage(level);
        println!("stage {level}: {}x{} window {} shifted {}", s.resolution, s.resolution, s.window, s.shifted);
    }
    let model = TecSwinModel::new(cfg, 0)?;
    let n = model.parameter_count();
    println!("{which}: {n} parameters ({:.2}M)", n as f64 / 1e6);
    Ok(())
}
