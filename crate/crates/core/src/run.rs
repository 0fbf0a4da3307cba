//! Run configuration and the end-to-end commands behind the CLI.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tecswin_tensor::{io as tio, Rng, Tensor};

use crate::config::ModelConfig;
use crate::datapipe::{self, HashPerplexity, Pipeline, PairRecord, ScriptRatio};
use crate::diffusion::{sample_loop, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imageio::{batch_to_images, image_grid, preprocess_image, RgbImage};
use crate::metrics::{extract_features, frechet_distance, FeatureSet, RandomConvFeatures};
use crate::nn::{load_parameters, Module};
use crate::schedule::{build_staged_schedule, greedy_substep_search, scan_scalar, SearchReport, StageSchedule};
use crate::shapes::{ShapeClass, ShapesDataset};
use crate::textcond::{LayerPreset, StubEncoder};
use crate::train::{train, LrSchedule, PromptCache, TrainConfig, TrainData, TrainRecord};
use crate::unet::TecSwinModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Length of the inference timeline.
    pub t_max: usize,
    pub stages: usize,
    pub substeps: usize,
    pub cond_scale: f32,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            t_max: 190,
            stages: 19,
            substeps: 10,
            cond_scale: 1.14,
        }
    }
}

impl SamplingConfig {
    pub fn schedule(&self) -> Result<StageSchedule> {
        build_staged_schedule(self.t_max, self.stages, &[self.substeps])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub seed: u64,
    pub layers: usize,
    pub preset: LayerPreset,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            layers: 24,
            preset: LayerPreset::FirstAndLastTwo,
        }
    }
}

/// Where training images come from: a filtered manifest, or the synthetic
/// shapes when no manifest is given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub synthetic_seed: u64,
}

/// Proxy-FID evaluation used by search and scans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub samples: usize,
    pub reference_images: usize,
    pub seed: u64,
    pub feature_width: usize,
    pub feature_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            reference_images: 256,
            seed: 1234,
            feature_width: 32,
            feature_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub encoder: EncoderConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            model_seed: 0,
            train: TrainConfig {
                lr: LrSchedule::toy(),
                ..TrainConfig::default()
            },
            sampling: SamplingConfig::default(),
            encoder: EncoderConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/toy"),
            checkpoint_every: 500,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn encoder(&self) -> Result<StubEncoder> {
        StubEncoder::new(self.encoder.seed, self.model.text_dim, self.model.text_tokens, self.encoder.layers)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("model.ckpt")
    }
}

pub fn save_model(model: &TecSwinModel, path: impl AsRef<Path>) -> Result<()> {
    Ok(tio::save_checkpoint(path, &model.named_parameters())?)
}

/// Builds the architecture from `cfg` and fills it from a checkpoint.
pub fn load_model(cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<TecSwinModel> {
    let path = path.as_ref();
    let tensors = tio::load_checkpoint(path)?;
    let mut model = TecSwinModel::new(cfg.clone(), 0)?;
    load_parameters(&mut model, &tensors).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(model)
}

/// Kept manifest records with their images, cycled in a seeded order.
pub struct ManifestData {
    images: Vec<Tensor>,
    prompts: Vec<String>,
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl ManifestData {
    pub fn load(path: &Path, size: usize, seed: u64) -> Result<Self> {
        let records = datapipe::read_manifest(BufReader::new(File::open(path)?))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut images = Vec::with_capacity(records.len());
        let mut prompts = Vec::with_capacity(records.len());
        for r in records {
            let img_path = base.join(&r.image);
            let img = RgbImage::load(&img_path)?;
            images.push(preprocess_image(&img, size)?.reshape(&[1, size, size, 3])?);
            let lang = r.lang.as_deref().unwrap_or("en");
            prompts.push(r.prompt.clone().unwrap_or_else(|| datapipe::template_prompt(&r.caption, lang)));
        }
        if images.is_empty() {
            return Err(Error::Config(format!("manifest {} has no records", path.display())));
        }
        Ok(Self {
            order: (0..images.len()).collect(),
            images,
            prompts,
            cursor: usize::MAX,
            rng: Rng::new(seed),
        })
    }
}

impl TrainData for ManifestData {
    fn next_batch(&mut self, b: usize) -> Result<(Tensor, Vec<String>)> {
        let mut rows = Vec::with_capacity(b);
        let mut caps = Vec::with_capacity(b);
        for _ in 0..b {
            if self.cursor >= self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            let i = self.order[self.cursor];
            self.cursor += 1;
            rows.push(&self.images[i]);
            caps.push(self.prompts[i].clone());
        }
        Ok((Tensor::concat(&rows, 0)?, caps))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: f32,
    pub last_loss: f32,
    pub checkpoint: PathBuf,
}

/// Trains from `init` (or from scratch), writing `model.ckpt`,
/// `loss.jsonl` and `config.json` under the output directory.
pub fn run_train(cfg: &RunConfig, init: Option<&Path>) -> Result<TrainSummary> {
    let encoder = cfg.encoder()?;
    let mut model = match init {
        Some(p) => load_model(&cfg.model, p)?,
        None => TecSwinModel::new(cfg.model.clone(), cfg.model_seed)?,
    };
    std::fs::create_dir_all(&cfg.output_dir)?;
    cfg.save(cfg.output_dir.join("config.json"))?;
    let mut data: Box<dyn TrainData> = match &cfg.data.manifest {
        Some(p) => Box::new(ManifestData::load(p, cfg.model.image_size, cfg.data.synthetic_seed)?),
        None => Box::new(ShapesDataset::new(cfg.model.image_size, cfg.data.synthetic_seed)),
    };
    let mut tc = cfg.train.clone();
    tc.layer_preset = cfg.encoder.preset;
    let mut log = BufWriter::new(File::create(cfg.output_dir.join("loss.jsonl"))?);
    let ckpt = cfg.checkpoint_path();
    let every = cfg.checkpoint_every;
    let records = train(&mut model, data.as_mut(), &encoder, &tc, &mut |rec: &TrainRecord, m| {
        serde_json::to_writer(&mut log, rec)?;
        log.write_all(b"\n")?;
        if every > 0 && (rec.step + 1) % every == 0 {
            save_model(m, &ckpt)?;
        }
        Ok(())
    })?;
    log.flush()?;
    save_model(&model, &ckpt)?;
    Ok(TrainSummary {
        steps: records.len(),
        first_loss: records.first().map_or(f32::NAN, |r| r.loss),
        last_loss: records.last().map_or(f32::NAN, |r| r.loss),
        checkpoint: ckpt,
    })
}

/// Generates `n` images for `prompt`; writes PNGs, a grid and the raw
/// tensor to `out_dir`.
pub fn run_sample(
    cfg: &RunConfig,
    model: &TecSwinModel,
    prompt: &str,
    n: usize,
    schedule: &StageSchedule,
    cond_scale: f32,
    seed: u64,
    out_dir: &Path,
) -> Result<Tensor> {
    std::fs::create_dir_all(out_dir)?;
    let encoder = cfg.encoder()?;
    let prompts = vec![prompt.to_string(); n];
    let text = PromptCache::new(&encoder, cfg.encoder.preset).encode(&prompts)?;
    let sched = NoiseSchedule::cosine(cfg.train.train_steps_grid)?;
    let ts = schedule.training_timesteps(sched.steps)?;
    let s = cfg.model.image_size;
    let imgs = sample_loop(model, &sched, &text, &[n, s, s, 3], &ts, cond_scale, &mut Rng::new(seed))?;
    let pngs = batch_to_images(&imgs)?;
    for (i, img) in pngs.iter().enumerate() {
        img.save_png(out_dir.join(format!("sample_{i:03}.png")))?;
    }
    image_grid(&pngs, (n as f64).sqrt().ceil() as usize)?.save_png(out_dir.join("grid.png"))?;
    tio::save_tensor(out_dir.join("samples.tsw"), &imgs)?;
    Ok(imgs)
}

/// Proxy-FID of class-balanced guided samples against reference images.
pub struct SampleEvaluator<'a> {
    pub model: &'a TecSwinModel,
    pub schedule: NoiseSchedule,
    pub text: Tensor,
    pub reference: FeatureSet,
    pub extractor: RandomConvFeatures,
    pub eval: EvalConfig,
}

impl<'a> SampleEvaluator<'a> {
    /// Prompts cycle through the shape classes; the reference set is drawn
    /// from the synthetic shapes.
    pub fn for_shapes(cfg: &RunConfig, model: &'a TecSwinModel) -> Result<Self> {
        let encoder = cfg.encoder()?;
        let prompts: Vec<String> = (0..cfg.eval.samples)
            .map(|i| ShapeClass::ALL[i % 4].prompt().to_string())
            .collect();
        let text = PromptCache::new(&encoder, cfg.encoder.preset).encode(&prompts)?;
        let extractor = RandomConvFeatures::new(cfg.eval.feature_seed, cfg.eval.feature_width);
        let per_class = cfg.eval.reference_images.div_ceil(4);
        let (real, _) = ShapesDataset::new(cfg.model.image_size, cfg.eval.seed ^ 0xfeed).balanced(per_class)?;
        let reference = extract_features(&real, &extractor)?;
        Ok(Self {
            model,
            schedule: NoiseSchedule::cosine(cfg.train.train_steps_grid)?,
            text,
            reference,
            extractor,
            eval: cfg.eval.clone(),
        })
    }

    pub fn samples(&self, schedule: &StageSchedule, cond_scale: f32) -> Result<Tensor> {
        let ts = schedule.training_timesteps(self.schedule.steps)?;
        let s = self.model.config.image_size;
        let n = self.eval.samples;
        sample_loop(self.model, &self.schedule, &self.text, &[n, s, s, 3], &ts, cond_scale, &mut Rng::new(self.eval.seed))
    }

    pub fn fid(&self, schedule: &StageSchedule, cond_scale: f32) -> Result<f64> {
        let imgs = self.samples(schedule, cond_scale)?;
        frechet_distance(&self.reference, &extract_features(&imgs, &self.extractor)?)
    }
}

/// Greedy per-stage substep search; writes `search.jsonl` and
/// `schedule.json`.
pub fn run_search(
    evaluator: &SampleEvaluator,
    base: &StageSchedule,
    candidates: &[usize],
    passes: usize,
    cond_scale: f32,
    out_dir: &Path,
) -> Result<SearchReport> {
    std::fs::create_dir_all(out_dir)?;
    let report = greedy_substep_search(&mut |s| evaluator.fid(s, cond_scale), base, candidates, passes)?;
    std::fs::write(out_dir.join("search.jsonl"), report.log_lines()?)?;
    save_schedule(&report.schedule, out_dir.join("schedule.json"))?;
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "initial_metric": report.initial_metric,
            "best_metric": report.best_metric,
            "trajectory": report.trajectory,
        }))? + "\n",
    )?;
    Ok(report)
}

pub fn save_schedule(s: &StageSchedule, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(s)? + "\n")?;
    Ok(())
}

pub fn load_schedule(path: impl AsRef<Path>) -> Result<StageSchedule> {
    let s: StageSchedule = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    s.validate()?;
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanParam {
    CondScale,
    /// Total steps of a uniform schedule.
    Timestep,
}

impl std::str::FromStr for ScanParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cond-scale" => Ok(Self::CondScale),
            "timestep" | "timesteps" => Ok(Self::Timestep),
            other => Err(Error::Config(format!("unknown scan parameter {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub param: String,
    pub best: f64,
    pub table: Vec<(f64, f64)>,
}

pub fn run_scan(
    evaluator: &SampleEvaluator,
    sampling: &SamplingConfig,
    param: ScanParam,
    grid: &[f64],
) -> Result<ScanResult> {
    let base = sampling.schedule()?;
    let (best, table) = match param {
        ScanParam::CondScale => scan_scalar(&mut |s| evaluator.fid(&base, s as f32), grid)?,
        ScanParam::Timestep => scan_scalar(
            &mut |n| {
                let steps = n.round() as usize;
                evaluator.fid(&StageSchedule::uniform(steps.max(1), steps)?, sampling.cond_scale)
            },
            grid,
        )?,
    };
    Ok(ScanResult {
        param: match param {
            ScanParam::CondScale => "cond-scale".into(),
            ScanParam::Timestep => "timestep".into(),
        },
        best,
        table,
    })
}

/// Filters a manifest; kept records go to `out`, quarantined ones to
/// `quarantine`, and the stats are returned.
pub fn run_filter(manifest: &Path, out: &Path, quarantine: &Path) -> Result<datapipe::FilterStats> {
    let records: Vec<PairRecord> = datapipe::read_manifest(BufReader::new(File::open(manifest)?))?;
    let scorer = HashPerplexity::default();
    let pipe = Pipeline::new(&scorer, &ScriptRatio);
    let result = pipe.run(records);
    let mut w = BufWriter::new(File::create(out)?);
    datapipe::write_manifest(&mut w, &result.kept)?;
    w.flush()?;
    let mut q = BufWriter::new(File::create(quarantine)?);
    datapipe::write_quarantine(&mut q, &result.quarantined)?;
    q.flush()?;
    Ok(result.stats)
}

/// Proxy FID between two directories of PNGs.
pub fn run_fid(real: &Path, fake: &Path, size: usize, feature_seed: u64, width: usize) -> Result<f64> {
    let ex = RandomConvFeatures::new(feature_seed, width);
    let a = extract_features(&crate::imageio::load_dir(real, size)?, &ex)?;
    let b = extract_features(&crate::imageio::load_dir(fake, size)?, &ex)?;
    frechet_distance(&a, &b)
}
