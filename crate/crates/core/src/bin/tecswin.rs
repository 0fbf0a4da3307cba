use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tecswin::run::{self, RunConfig, SampleEvaluator, ScanParam};
use tecswin::schedule::{build_staged_schedule, parse_candidates, parse_grid};
use tecswin::train::LrSchedule;
use tecswin::Result;

#[derive(Parser)]
#[command(name = "tecswin", version, about = "Shifted-window text-to-image diffusion")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Constant 1e-6 learning rate, continuing from the config's checkpoint.
        #[arg(long)]
        finetune: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate images for a prompt.
    Sample {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 1.14)]
        cond_scale: f32,
        #[arg(long, default_value_t = 190)]
        steps: usize,
        /// Schedule file written by `search-schedule`.
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Greedy per-stage substep search against proxy FID.
    SearchSchedule {
        #[arg(long, default_value_t = 19)]
        stages: usize,
        #[arg(long, default_value_t = 10)]
        base_substeps: usize,
        #[arg(long, default_value = "5..15")]
        candidates: String,
        #[arg(long, default_value_t = 1)]
        passes: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "search")]
        out: PathBuf,
    },
    /// Proxy FID over a grid of cond-scales or step counts.
    Scan {
        #[arg(long, default_value = "cond-scale")]
        param: String,
        #[arg(long, default_value = "1.10:1.26:0.02")]
        grid: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filter a JSONL manifest of image-text pairs.
    Filter {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quarantine: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Proxy FID between two directories of PNG images.
    Fid {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        feature_seed: u64,
        #[arg(long, default_value_t = 32)]
        width: usize,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_trained(cfg: &RunConfig, checkpoint: &Option<PathBuf>) -> Result<tecswin::TecSwinModel> {
    let path = checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
    run::load_model(&cfg.model, path)
}

fn write_json(path: &Option<PathBuf>, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { config, finetune, steps } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let init = finetune.then(|| cfg.checkpoint_path());
            if finetune {
                cfg.train.lr = LrSchedule::finetune();
            }
            let summary = run::run_train(&cfg, init.as_deref())?;
            write_json(&None, &summary)
        }
        Cmd::Sample { prompt, cond_scale, steps, schedule, seed, n, config, checkpoint, out } => {
            let cfg = load_config(&config)?;
            let model = load_trained(&cfg, &checkpoint)?;
            let sched = match schedule {
                Some(p) => run::load_schedule(p)?,
                None => tecswin::schedule::StageSchedule::uniform(cfg.sampling.t_max, steps)?,
            };
            run::run_sample(&cfg, &model, &prompt, n, &sched, cond_scale, seed, &out)?;
            println!("wrote {n} samples to {}", out.display());
            Ok(())
        }
        Cmd::SearchSchedule { stages, base_substeps, candidates, passes, config, checkpoint, out } => {
            let cfg = load_config(&config)?;
            let model = load_trained(&cfg, &checkpoint)?;
            let eval = SampleEvaluator::for_shapes(&cfg, &model)?;
            let base = build_staged_schedule(cfg.sampling.t_max, stages, &[base_substeps])?;
            let report = run::run_search(&eval, &base, &parse_candidates(&candidates)?, passes, cfg.sampling.cond_scale, &out)?;
            println!(
                "proxy FID {:.4} -> {:.4}; schedule written to {}",
                report.initial_metric,
                report.best_metric,
                out.join("schedule.json").display()
            );
            Ok(())
        }
        Cmd::Scan { param, grid, config, checkpoint, out } => {
            let cfg = load_config(&config)?;
            let model = load_trained(&cfg, &checkpoint)?;
            let eval = SampleEvaluator::for_shapes(&cfg, &model)?;
            let result = run::run_scan(&eval, &cfg.sampling, param.parse::<ScanParam>()?, &parse_grid(&grid)?)?;
            write_json(&out, &result)
        }
        Cmd::Filter { manifest, out, quarantine, stats } => {
            let s = run::run_filter(&manifest, &out, &quarantine)?;
            write_json(&stats, &s)
        }
        Cmd::Fid { real, fake, size, feature_seed, width } => {
            let fid = run::run_fid(&real, &fake, size, feature_seed, width)?;
            println!("{fid:.6}");
            Ok(())
        }
    }
}
