//! Staged inference schedules, per-stage substep search and scalar scans.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition of the inference timeline `[t_max .. 0]` into stages, each
/// sampled with its own number of uniformly spaced substeps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub t_max: usize,
    /// `S + 1` strictly decreasing boundaries from `t_max` to 0.
    pub boundaries: Vec<usize>,
    pub substeps: Vec<usize>,
}

/// Uniform stages over `[t_max .. 0]`; boundaries are rounded to the
/// nearest integer when `t_max` is not a multiple of `stages`.
pub fn build_staged_schedule(t_max: usize, stages: usize, substeps: &[usize]) -> Result<StageSchedule> {
    if stages == 0 || substeps.is_empty() {
        return Err(Error::Schedule("need at least one stage and substep count".into()));
    }
    if t_max < stages {
        return Err(Error::Schedule(format!("{stages} stages do not fit in {t_max} timesteps")));
    }
    let substeps = match substeps.len() {
        1 => vec![substeps[0]; stages],
        n if n == stages => substeps.to_vec(),
        n => return Err(Error::Schedule(format!("{n} substep counts for {stages} stages"))),
    };
    let boundaries = (0..=stages)
        .map(|i| (t_max * (stages - i) + stages / 2) / stages)
        .collect();
    let s = StageSchedule {
        t_max,
        boundaries,
        substeps,
    };
    s.validate()?;
    Ok(s)
}

impl StageSchedule {
    pub fn uniform(t_max: usize, steps: usize) -> Result<Self> {
        build_staged_schedule(t_max, 1, &[steps])
    }

    pub fn stages(&self) -> usize {
        self.substeps.len()
    }

    pub fn total_steps(&self) -> usize {
        self.substeps.iter().sum()
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.boundaries[stage] - self.boundaries[stage + 1]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.substeps.len();
        if s == 0 || self.boundaries.len() != s + 1 {
            return Err(Error::Schedule(format!(
                "{} boundaries for {s} stages",
                self.boundaries.len()
            )));
        }
        if self.boundaries[0] != self.t_max || self.boundaries[s] != 0 {
            return Err(Error::Schedule("boundaries must run from t_max to 0".into()));
        }
        if self.boundaries.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Schedule("boundaries must be strictly decreasing".into()));
        }
        for (i, &n) in self.substeps.iter().enumerate() {
            if n == 0 || n > self.stage_width(i) {
                return Err(Error::Schedule(format!(
                    "stage {i}: {n} substeps outside 1..={}",
                    self.stage_width(i)
                )));
            }
        }
        Ok(())
    }

    /// Realized timesteps on the inference timeline, ending at 0.
    pub fn timesteps(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_steps() + 1);
        for (i, &n) in self.substeps.iter().enumerate() {
            let hi = self.boundaries[i];
            let width = self.stage_width(i);
            for j in 0..n {
                out.push(hi - (j * width + n / 2) / n);
            }
        }
        out.push(0);
        out
    }

    /// Timesteps mapped proportionally onto a `train_steps` grid.
    pub fn training_timesteps(&self, train_steps: usize) -> Result<Vec<usize>> {
        if self.t_max > train_steps {
            return Err(Error::Schedule(format!(
                "inference timeline {} longer than training grid {train_steps}",
                self.t_max
            )));
        }
        Ok(self
            .timesteps()
            .into_iter()
            .map(|k| (k * train_steps + self.t_max / 2) / self.t_max)
            .collect())
    }

    pub fn with_substeps(&self, stage: usize, n: usize) -> Result<Self> {
        let mut s = self.clone();
        *s.substeps
            .get_mut(stage)
            .ok_or_else(|| Error::Schedule(format!("no stage {stage}")))? = n;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub pass: usize,
    pub stage: usize,
    pub substeps: usize,
    pub metric: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub initial_metric: f64,
    pub trials: Vec<Trial>,
    /// Best metric after each stage visit.
    pub trajectory: Vec<f64>,
    pub schedule: StageSchedule,
    pub best_metric: f64,
}

impl SearchReport {
    /// One JSON object per trial, newline-terminated.
    pub fn log_lines(&self) -> Result<String> {
        let mut out = String::new();
        for t in &self.trials {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Coordinate descent over stage substep counts, stage 0 first.
///
/// The incumbent count is always kept as a candidate and wins ties, so the
/// best metric never increases. Counts wider than a stage are skipped.
pub fn greedy_substep_search(
    metric: &mut dyn FnMut(&StageSchedule) -> Result<f64>,
    base: &StageSchedule,
    candidates: &[usize],
    passes: usize,
) -> Result<SearchReport> {
    base.validate()?;
    if candidates.is_empty() {
        return Err(Error::Schedule("no substep candidates".into()));
    }
    let initial = metric(base).map_err(|e| Error::Search {
        stage: 0,
        source: Box::new(e),
    })?;
    let mut best = base.clone();
    let mut best_metric = initial;
    let mut trials = Vec::new();
    let mut trajectory = Vec::new();
    for pass in 0..passes.max(1) {
        for stage in 0..best.stages() {
            let incumbent = best.substeps[stage];
            let mut stage_best = (incumbent, best_metric);
            for &n in candidates {
                if n == incumbent || n == 0 || n > best.stage_width(stage) {
                    continue;
                }
                let cand = best.with_substeps(stage, n)?;
                let m = metric(&cand).map_err(|e| Error::Search {
                    stage,
                    source: Box::new(e),
                })?;
                trials.push(Trial {
                    pass,
                    stage,
                    substeps: n,
                    metric: m,
                    accepted: false,
                });
                if m < stage_best.1 {
                    stage_best = (n, m);
                }
            }
            if stage_best.0 != incumbent {
                best = best.with_substeps(stage, stage_best.0)?;
                best_metric = stage_best.1;
                if let Some(t) = trials
                    .iter_mut()
                    .rev()
                    .find(|t| t.stage == stage && t.pass == pass && t.substeps == stage_best.0)
                {
                    t.accepted = true;
                }
            }
            trajectory.push(best_metric);
        }
    }
    Ok(SearchReport {
        initial_metric: initial,
        trials,
        trajectory,
        schedule: best,
        best_metric,
    })
}

/// Evaluates `metric` on every grid point; returns the first minimiser and
/// the full `(value, metric)` table.
pub fn scan_scalar(
    metric: &mut dyn FnMut(f64) -> Result<f64>,
    grid: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::Config("empty scan grid".into()));
    }
    let mut table = Vec::with_capacity(grid.len());
    let mut best = (grid[0], f64::INFINITY);
    for &v in grid {
        let m = metric(v)?;
        table.push((v, m));
        if m < best.1 {
            best = (v, m);
        }
    }
    Ok((best.0, table))
}

/// `"a:b:step"` (inclusive) or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("bad grid {spec:?}"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() == 3 {
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let (lo, hi, step) = (nums[0], nums[1], nums[2]);
        if !(step > 0.0) || hi < lo {
            return Err(bad());
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        // round to the step's decimal precision so 1.1 + 2*0.02 prints as 1.14
        let scale = 1e9;
        return Ok((0..=n)
            .map(|i| ((lo + i as f64 * step) * scale).round() / scale)
            .collect());
    }
    spec.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect()
}

/// `"a..b"` (inclusive) or a comma-separated list of counts.
pub fn parse_candidates(spec: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("bad candidate list {spec:?}"));
    if let Some((a, b)) = spec.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    spec.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
        .collect()
}
