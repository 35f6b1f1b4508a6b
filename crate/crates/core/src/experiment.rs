//! The cross-track generalization experiment: collect expert data on a
//! training track, fit both learners over a sweep of training-set sizes and
//! seeds, drive every held-out track, and tabulate the outcome.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{collect, split, CollectConfig, Dataset, Sample};
use crate::driver::{ExpertDriver, LaneOffsetProfile, LearnedDriver, SupervisedDriver};
use crate::episode::{run_episode, Controller, Decision, EpisodeConfig, Observation, TerminalEvent};
use crate::forest::{fit_forest, Forest, ForestConfig, DEFAULT_COV_EPS};
use crate::lidar::LidarScan;
use crate::manifest::{sha256_bytes, Manifest};
use crate::mlp::{self, Mlp, TrainConfig};
use crate::pid::{ExpertConfig, PidGains};
use crate::supervisor::{calibrate_threshold, dataset_covs, median, ControlSource, RunStats, SupervisorConfig};
use crate::track::TrackGeometry;
use crate::trackgen::resolve_track;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    RandomForest,
    Mlp,
    /// Forest steering with CoV-triggered fallback to the PID expert.
    SupervisedForest,
    /// The PID expert itself; a harness sanity reference.
    Expert,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::RandomForest => "random_forest",
            ModelKind::Mlp => "mlp",
            ModelKind::SupervisedForest => "supervised_forest",
            ModelKind::Expert => "expert",
        }
    }

    fn needs_forest(&self) -> bool {
        matches!(self, ModelKind::RandomForest | ModelKind::SupervisedForest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisorSettings {
    /// Validation-CoV quantile used for `cov_on`.
    pub quantile: f64,
    pub min_fallback_steps: u64,
    pub eps: f64,
}

impl Default for SupervisorSettings {
    fn default() -> Self {
        SupervisorSettings {
            quantile: 0.999,
            min_fallback_steps: 250,
            eps: DEFAULT_COV_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Preset name or track JSON path.
    pub train_track: String,
    pub eval_tracks: Vec<String>,
    pub target_speed_mps: f64,
    /// Training-set sizes drawn from the collected training split.
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelKind>,
    pub output_dir: PathBuf,
    /// Fraction of collected samples held out for calibration and OOD checks.
    pub holdout_fraction: f64,
    /// Sampling rate of the CoV time series in the plot data.
    pub series_hz: f64,
    pub collect: CollectConfig,
    pub episode: EpisodeConfig,
    pub expert: ExpertConfig,
    pub forest: ForestConfig,
    pub mlp: TrainConfig,
    pub supervisor: SupervisorSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "reference".into(),
            train_track: "train-a".into(),
            eval_tracks: vec!["train-a".into(), "eval-b".into()],
            target_speed_mps: 26.82,
            budgets: vec![500, 2000, 8000],
            seeds: vec![1, 2, 3, 4, 5],
            models: vec![ModelKind::RandomForest, ModelKind::Mlp, ModelKind::SupervisedForest],
            output_dir: PathBuf::from("runs/reference"),
            holdout_fraction: 0.1,
            series_hz: 10.0,
            collect: CollectConfig::default(),
            episode: EpisodeConfig {
                record_every: 0,
                ..EpisodeConfig::default()
            },
            expert: ExpertConfig::default(),
            forest: ForestConfig::default(),
            mlp: TrainConfig::default(),
            supervisor: SupervisorSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::parse("experiment config", e))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.budgets.is_empty() || self.budgets.contains(&0) {
            return Err(Error::Config("budgets must be a non-empty list of positive sizes".into()));
        }
        if self.models.is_empty() || self.eval_tracks.is_empty() {
            return Err(Error::Config("models and eval_tracks must be non-empty".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config("holdout_fraction must be in (0, 1)".into()));
        }
        if !(self.target_speed_mps > 0.0) {
            return Err(Error::Config("target_speed_mps must be positive".into()));
        }
        if !(self.series_hz > 0.0) {
            return Err(Error::Config("series_hz must be positive".into()));
        }
        for t in std::iter::once(&self.train_track).chain(&self.eval_tracks) {
            resolve_track(t)?;
        }
        self.forest.validate()?;
        self.mlp.validate()?;
        self.expert.validate()?;
        self.episode.sim.validate()?;
        self.episode.lidar.validate()
    }

    /// Hash of the canonical serialized config.
    pub fn hash(&self) -> String {
        sha256_bytes(self.to_toml().as_bytes())
    }

    fn collect_config(&self, seed: u64) -> CollectConfig {
        CollectConfig {
            seed,
            target_speed_mps: self.target_speed_mps,
            ..self.collect.clone()
        }
    }

    fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            initial_speed: self.target_speed_mps,
            record_every: 0,
            ..self.episode.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: ModelKind,
    pub track: String,
    pub seed: u64,
    pub budget: usize,
    pub lap_fraction: f64,
    pub terminal: TerminalEvent,
    pub steps: u64,
    pub interventions: u64,
    pub max_abs_d: f64,
    pub mean_cov: Option<f64>,
    pub max_cov: Option<f64>,
    pub total_odd_counts: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: ModelKind,
    pub track: String,
    pub budget: usize,
    pub n_seeds: usize,
    pub mean_lap_fraction: f64,
    pub min_lap_fraction: f64,
    pub max_lap_fraction: f64,
    pub completed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub seed: u64,
    pub budget: usize,
    pub median_cov_clean: f64,
    pub median_cov_permuted: f64,
    pub permutation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub seed: u64,
    pub budget: usize,
    pub cov_on: f64,
    pub cov_off: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub model: ModelKind,
    pub track: String,
    pub seed: u64,
    pub budget: usize,
    pub t: f64,
    pub cov: f64,
    pub sigma: f64,
    pub odd_count: usize,
    pub source: ControlSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub config_hash: String,
    pub train_track: String,
    pub tracks: Vec<String>,
    pub models: Vec<ModelKind>,
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Collected samples per seed before the holdout split.
    pub collected: Vec<(u64, usize)>,
    pub rows: Vec<EvalRow>,
    pub aggregate: Vec<AggregateRow>,
    pub ood: Vec<OodRow>,
    pub calibration: Vec<CalibrationRow>,
}

impl EvalReport {
    pub fn rows_for(&self, model: ModelKind, track: &str, budget: usize) -> Vec<&EvalRow> {
        self.rows
            .iter()
            .filter(|r| r.model == model && r.track == track && r.budget == budget)
            .collect()
    }

    pub fn aggregate_for(&self, model: ModelKind, track: &str, budget: usize) -> Option<&AggregateRow> {
        self.aggregate
            .iter()
            .find(|a| a.model == model && a.track == track && a.budget == budget)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn rows_csv(&self) -> String {
        let mut out = String::from(
            "model,track,seed,budget,lap_fraction,terminal,steps,interventions,max_abs_d,mean_cov,max_cov,total_odd_counts\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.model.as_str(),
                r.track,
                r.seed,
                r.budget,
                r.lap_fraction,
                r.terminal.as_str(),
                r.steps,
                r.interventions,
                r.max_abs_d,
                opt(r.mean_cov),
                opt(r.max_cov),
                r.total_odd_counts.map(|v| v.to_string()).unwrap_or_default()
            );
        }
        out
    }

    /// Plot data: lap fraction against training-set size.
    pub fn budget_csv(&self) -> String {
        let mut out =
            String::from("model,track,budget,n_seeds,mean_lap_fraction,min_lap_fraction,max_lap_fraction,completed\n");
        for a in &self.aggregate {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                a.model.as_str(),
                a.track,
                a.budget,
                a.n_seeds,
                a.mean_lap_fraction,
                a.min_lap_fraction,
                a.max_lap_fraction,
                a.completed
            );
        }
        out
    }

    /// Markdown table of mean lap fraction per model and track, one column per budget.
    pub fn markdown_table(&self) -> String {
        let mut out = String::from("| model | track |");
        for b in &self.budgets {
            let _ = write!(out, " n={b} |");
        }
        out.push_str("\n|---|---|");
        out.push_str(&"---|".repeat(self.budgets.len()));
        out.push('\n');
        for m in &self.models {
            for t in &self.tracks {
                let _ = write!(out, "| {} | {} |", m.as_str(), t);
                for &b in &self.budgets {
                    match self.aggregate_for(*m, t, b) {
                        Some(a) => {
                            let _ = write!(out, " {:.3} ({}/{}) |", a.mean_lap_fraction, a.completed, a.n_seeds);
                        }
                        None => out.push_str(" - |"),
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Means over seeds, accumulated in row order.
pub fn aggregate(rows: &[EvalRow], models: &[ModelKind], tracks: &[String], budgets: &[usize]) -> Vec<AggregateRow> {
    let mut out = Vec::new();
    for m in models {
        for t in tracks {
            for &b in budgets {
                let sel: Vec<&EvalRow> = rows
                    .iter()
                    .filter(|r| r.model == *m && &r.track == t && r.budget == b)
                    .collect();
                if sel.is_empty() {
                    continue;
                }
                let sum: f64 = sel.iter().map(|r| r.lap_fraction).sum();
                out.push(AggregateRow {
                    model: *m,
                    track: t.clone(),
                    budget: b,
                    n_seeds: sel.len(),
                    mean_lap_fraction: sum / sel.len() as f64,
                    min_lap_fraction: sel.iter().map(|r| r.lap_fraction).fold(f64::INFINITY, f64::min),
                    max_lap_fraction: sel.iter().map(|r| r.lap_fraction).fold(f64::NEG_INFINITY, f64::max),
                    completed: sel.iter().filter(|r| r.terminal == TerminalEvent::LapComplete).count(),
                });
            }
        }
    }
    out
}

/// Wraps a controller and accumulates ensemble statistics and a decimated
/// CoV series from its decisions.
pub struct Recorder<C> {
    pub inner: C,
    pub stats: RunStats,
    pub series: Vec<(f64, f64, f64, usize, ControlSource)>,
    every: u64,
}

impl<C: Controller> Recorder<C> {
    pub fn new(inner: C, every: u64) -> Self {
        Recorder {
            inner,
            stats: RunStats::default(),
            series: Vec::new(),
            every: every.max(1),
        }
    }
}

impl<C: Controller> Controller for Recorder<C> {
    fn decide(&mut self, obs: &Observation<'_>) -> Decision {
        let d = self.inner.decide(obs);
        if let Some(s) = &d.stats {
            self.stats.accumulate(s, d.source);
            if obs.step % self.every == 0 {
                self.series.push((obs.t, s.cov, s.std, s.odd_count, d.source));
            }
        }
        d
    }
}

/// A fixed, seeded, non-identity permutation of beam indices.
pub fn beam_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity: Vec<usize> = (0..n).collect();
    let mut p = identity.clone();
    while n > 1 && p == identity {
        p.shuffle(&mut rng);
    }
    p
}

pub fn permute_scans(data: &Dataset, perm: &[usize]) -> Dataset {
    let samples = data
        .samples
        .iter()
        .map(|s| Sample {
            scan: LidarScan::new(perm.iter().map(|&i| s.scan.distances[i]).collect()),
            steer: s.steer,
        })
        .collect();
    Dataset {
        meta: data.meta.clone(),
        samples,
    }
}

/// Median CoV on clean versus beam-permuted validation scans.
pub fn ood_check(forest: &Forest, val: &Dataset, perm_seed: u64, eps: f64) -> Result<(f64, f64, Vec<usize>)> {
    let perm = beam_permutation(val.meta.beam_count, perm_seed);
    let clean = dataset_covs(forest, val, eps)?;
    let shuffled = dataset_covs(forest, &permute_scans(val, &perm), eps)?;
    if clean.is_empty() {
        return Err(Error::Dataset("empty validation set".into()));
    }
    Ok((median(&clean), median(&shuffled), perm))
}

struct Trained {
    seed: u64,
    budget: usize,
    forest: Option<Arc<Forest>>,
    mlp: Option<Arc<Mlp>>,
    supervisor: Option<SupervisorConfig>,
    ood: Option<OodRow>,
}

fn train_cell(
    cfg: &ExperimentConfig,
    seed: u64,
    budget: usize,
    train: &Dataset,
    holdout: &Dataset,
) -> Result<Trained> {
    if budget > train.len() {
        return Err(Error::Config(format!(
            "budget {budget} exceeds the {} training samples collected for seed {seed}",
            train.len()
        )));
    }
    let sub = train.subsample(budget, seed);
    let wants_forest = cfg.models.iter().any(|m| m.needs_forest());
    let forest = if wants_forest {
        let fc = ForestConfig {
            seed,
            ..cfg.forest.clone()
        };
        Some(Arc::new(fit_forest(&sub, &fc)?))
    } else {
        None
    };
    let mlp = if cfg.models.contains(&ModelKind::Mlp) {
        let tc = TrainConfig {
            seed,
            ..cfg.mlp.clone()
        };
        Some(Arc::new(mlp::train(&sub, &tc)?.0))
    } else {
        None
    };
    let eps = cfg.supervisor.eps;
    let supervisor = match (&forest, cfg.models.contains(&ModelKind::SupervisedForest)) {
        (Some(f), true) => {
            let cal = calibrate_threshold(f, holdout, cfg.supervisor.quantile, eps)?;
            Some(SupervisorConfig {
                cov_on: cal.cov_on,
                cov_off: cal.cov_off,
                min_fallback_steps: cfg.supervisor.min_fallback_steps,
                eps,
            })
        }
        _ => None,
    };
    let ood = match &forest {
        Some(f) => {
            let (clean, permuted, permutation) = ood_check(f, holdout, seed, eps)?;
            Some(OodRow {
                seed,
                budget,
                median_cov_clean: clean,
                median_cov_permuted: permuted,
                permutation,
            })
        }
        None => None,
    };
    Ok(Trained {
        seed,
        budget,
        forest,
        mlp,
        supervisor,
        ood,
    })
}

fn drive(
    cfg: &ExperimentConfig,
    cell: &Trained,
    model: ModelKind,
    track: &TrackGeometry,
    track_name: &str,
) -> Result<(EvalRow, Vec<SeriesPoint>)> {
    let ep = cfg.episode_config();
    let every = ((1.0 / (ep.sim.dt * cfg.series_hz)).round() as u64).max(1);
    let speed = cfg.target_speed_mps;
    let eps = cfg.supervisor.eps;
    let missing = |what: &str| Error::Config(format!("{what} was not trained for model {}", model.as_str()));
    let (log, stats, series, has_stats) = match model {
        ModelKind::RandomForest => {
            let f = cell.forest.clone().ok_or_else(|| missing("forest"))?;
            let mut c = Recorder::new(LearnedDriver::new(f, cfg.expert.clone(), speed, eps), every);
            let log = run_episode(&mut c, track, &ep)?;
            (log, c.stats, c.series, true)
        }
        ModelKind::SupervisedForest => {
            let f = cell.forest.clone().ok_or_else(|| missing("forest"))?;
            let sup = cell.supervisor.ok_or_else(|| missing("calibration"))?;
            let mut c = Recorder::new(SupervisedDriver::new(f, cfg.expert.clone(), speed, sup)?, every);
            let log = run_episode(&mut c, track, &ep)?;
            (log, c.stats, c.series, true)
        }
        ModelKind::Mlp => {
            let m = cell.mlp.clone().ok_or_else(|| missing("mlp"))?;
            let mut c = LearnedDriver::new(m, cfg.expert.clone(), speed, eps);
            let log = run_episode(&mut c, track, &ep)?;
            (log, RunStats::default(), Vec::new(), false)
        }
        ModelKind::Expert => {
            let mut c = ExpertDriver::new(cfg.expert.clone(), speed);
            let log = run_episode(&mut c, track, &ep)?;
            (log, RunStats::default(), Vec::new(), false)
        }
    };
    let mean_cov = if stats.steps > 0 {
        Some(stats.mean_cov())
    } else {
        None
    };
    let row = EvalRow {
        model,
        track: track_name.to_string(),
        seed: cell.seed,
        budget: cell.budget,
        lap_fraction: log.summary.lap_fraction,
        terminal: log.summary.terminal,
        steps: log.summary.steps,
        interventions: stats.interventions,
        max_abs_d: log.summary.max_abs_d,
        mean_cov: if has_stats { mean_cov } else { None },
        max_cov: if has_stats { Some(stats.max_cov) } else { None },
        total_odd_counts: if has_stats { Some(stats.total_odd_counts) } else { None },
    };
    let series = series
        .into_iter()
        .map(|(t, cov, sigma, odd_count, source)| SeriesPoint {
            model,
            track: track_name.to_string(),
            seed: cell.seed,
            budget: cell.budget,
            t,
            cov,
            sigma,
            odd_count,
            source,
        })
        .collect();
    Ok((row, series))
}

pub struct EvalOutput {
    pub report: EvalReport,
    pub series: Vec<SeriesPoint>,
}

/// Runs the full protocol. Output depends only on the config.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<EvalOutput> {
    cfg.validate()?;
    let train_track = resolve_track(&cfg.train_track)?;
    let tracks: Vec<TrackGeometry> = cfg
        .eval_tracks
        .iter()
        .map(|t| resolve_track(t))
        .collect::<Result<_>>()?;
    let ep = cfg.episode_config();
    let needs_data = cfg.models.iter().any(|m| *m != ModelKind::Expert);

    let per_seed: Vec<(u64, usize, Dataset, Dataset)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<_> {
            if !needs_data {
                let empty = Dataset {
                    meta: Default::default(),
                    samples: Vec::new(),
                };
                return Ok((seed, 0, empty.clone(), empty));
            }
            let data = collect(&train_track, &cfg.expert, &cfg.collect_config(seed), &ep)?;
            let (train, holdout) = split(&data, 1.0 - cfg.holdout_fraction, seed)?;
            Ok((seed, data.len(), train, holdout))
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..per_seed.len())
        .flat_map(|s| (0..cfg.budgets.len()).map(move |b| (s, b)))
        .collect();
    let cells: Vec<Trained> = jobs
        .par_iter()
        .map(|&(s, b)| {
            let (seed, _, train, holdout) = &per_seed[s];
            if !needs_data {
                return Ok(Trained {
                    seed: *seed,
                    budget: cfg.budgets[b],
                    forest: None,
                    mlp: None,
                    supervisor: None,
                    ood: None,
                });
            }
            train_cell(cfg, *seed, cfg.budgets[b], train, holdout)
        })
        .collect::<Result<_>>()?;

    let mut drives = Vec::new();
    for (ci, _) in cells.iter().enumerate() {
        for (ti, _) in tracks.iter().enumerate() {
            for &m in &cfg.models {
                drives.push((ci, ti, m));
            }
        }
    }
    let results: Vec<(EvalRow, Vec<SeriesPoint>)> = drives
        .par_iter()
        .map(|&(ci, ti, m)| drive(cfg, &cells[ci], m, &tracks[ti], &cfg.eval_tracks[ti]))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(results.len());
    let mut series = Vec::new();
    for (r, s) in results {
        rows.push(r);
        series.extend(s);
    }
    let aggregate = aggregate(&rows, &cfg.models, &cfg.eval_tracks, &cfg.budgets);
    let report = EvalReport {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        train_track: cfg.train_track.clone(),
        tracks: cfg.eval_tracks.clone(),
        models: cfg.models.clone(),
        budgets: cfg.budgets.clone(),
        seeds: cfg.seeds.clone(),
        collected: per_seed.iter().map(|(s, n, _, _)| (*s, *n)).collect(),
        rows,
        aggregate,
        ood: cells.iter().filter_map(|c| c.ood.clone()).collect(),
        calibration: cells
            .iter()
            .filter_map(|c| {
                c.supervisor.map(|s| CalibrationRow {
                    seed: c.seed,
                    budget: c.budget,
                    cov_on: s.cov_on,
                    cov_off: s.cov_off,
                })
            })
            .collect(),
    };
    Ok(EvalOutput { report, series })
}

pub fn series_csv(series: &[SeriesPoint]) -> String {
    let mut out = String::from("model,track,seed,budget,t,cov,sigma,odd_count,source\n");
    for p in series {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            p.model.as_str(),
            p.track,
            p.seed,
            p.budget,
            p.t,
            p.cov,
            p.sigma,
            p.odd_count,
            p.source.as_str()
        );
    }
    out
}

pub const REPORT_FILE: &str = "eval_report.json";
pub const ROWS_FILE: &str = "eval_rows.csv";
pub const BUDGET_FILE: &str = "lap_fraction_vs_budget.csv";
pub const SERIES_FILE: &str = "cov_series.csv";

/// Writes the report, plot data and manifest into `dir`.
pub fn write_outputs(out: &EvalOutput, cfg: &ExperimentConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        (REPORT_FILE, out.report.to_json()),
        (ROWS_FILE, out.report.rows_csv()),
        (BUDGET_FILE, out.report.budget_csv()),
        (SERIES_FILE, series_csv(&out.series)),
    ];
    let mut manifest = Manifest::new("evaluate", cfg.seeds.first().copied());
    manifest.set_config(cfg.to_toml());
    for (name, text) in files {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        manifest.add_output(dir, name)?;
    }
    manifest.write(dir)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneCandidate {
    pub kp: f64,
    pub kd: f64,
    pub k_psi: f64,
    pub completed: bool,
    pub nominal_max_abs_d: f64,
    /// RMS of (d - lane target) while tracking step changes of the lane target.
    pub tracking_rms_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: ExpertConfig,
    pub candidates: Vec<TuneCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneGrid {
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
    pub k_psi: Vec<f64>,
    pub lane_amplitude_m: f64,
    pub lane_hold_s: f64,
    pub seed: u64,
}

impl Default for TuneGrid {
    fn default() -> Self {
        TuneGrid {
            kp: vec![0.3, 0.6, 1.0, 1.5],
            kd: vec![0.0, 0.05, 0.1],
            k_psi: vec![1.5],
            lane_amplitude_m: 3.0,
            lane_hold_s: 3.0,
            seed: 7,
        }
    }
}

/// Grid search over lateral gains. A candidate must complete a nominal lap
/// and a lane-step lap; the lowest tracking RMS wins, ties to grid order.
pub fn tune_pid(track: &TrackGeometry, base: &ExpertConfig, grid: &TuneGrid, target_speed: f64) -> Result<TuneResult> {
    let mut configs = Vec::new();
    for &kp in &grid.kp {
        for &kd in &grid.kd {
            for &k_psi in &grid.k_psi {
                configs.push(ExpertConfig {
                    lateral: PidGains { kp, kd, ..base.lateral },
                    k_psi,
                    ..base.clone()
                });
            }
        }
    }
    let ep = EpisodeConfig {
        initial_speed: target_speed,
        record_every: 0,
        ..EpisodeConfig::default()
    };
    let candidates: Vec<TuneCandidate> = configs
        .par_iter()
        .map(|c| -> Result<TuneCandidate> {
            let nominal = run_episode(&mut ExpertDriver::new(c.clone(), target_speed), track, &ep)?;
            let profile = LaneOffsetProfile::seeded(grid.lane_amplitude_m, grid.lane_hold_s, grid.seed);
            let mut d = ExpertDriver::new(c.clone(), target_speed).with_lane_offset(profile.clone());
            let excited = run_episode(&mut d, track, &EpisodeConfig { record_every: 10, ..ep.clone() })?;
            let sq: f64 = excited
                .records
                .iter()
                .map(|r| (r.frame.d - profile.at(r.t)).powi(2))
                .sum();
            let rms = (sq / excited.records.len().max(1) as f64).sqrt();
            Ok(TuneCandidate {
                kp: c.lateral.kp,
                kd: c.lateral.kd,
                k_psi: c.k_psi,
                completed: nominal.summary.terminal == TerminalEvent::LapComplete
                    && excited.summary.terminal == TerminalEvent::LapComplete,
                nominal_max_abs_d: nominal.summary.max_abs_d,
                tracking_rms_m: rms,
            })
        })
        .collect::<Result<_>>()?;
    let best = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.completed)
        .min_by(|a, b| a.1.tracking_rms_m.total_cmp(&b.1.tracking_rms_m).then(a.0.cmp(&b.0)))
        .map(|(i, _)| configs[i].clone())
        .ok_or_else(|| Error::Config("no gain candidate completed both laps".into()))?;
    Ok(TuneResult { best, candidates })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: ModelKind, seed: u64, lap: f64) -> EvalRow {
        EvalRow {
            model,
            track: "t".into(),
            seed,
            budget: 10,
            lap_fraction: lap,
            terminal: if lap >= 1.0 {
                TerminalEvent::LapComplete
            } else {
                TerminalEvent::OffTrack
            },
            steps: 1,
            interventions: 0,
            max_abs_d: 0.0,
            mean_cov: None,
            max_cov: None,
            total_odd_counts: None,
        }
    }

    #[test]
    fn aggregation_matches_rows() {
        let rows = vec![
            row(ModelKind::Mlp, 1, 0.1),
            row(ModelKind::Mlp, 2, 0.2),
            row(ModelKind::Mlp, 3, 1.0),
            row(ModelKind::RandomForest, 1, 1.0),
        ];
        let agg = aggregate(&rows, &[ModelKind::RandomForest, ModelKind::Mlp], &["t".into()], &[10]);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[1].mean_lap_fraction, (0.1 + 0.2 + 1.0) / 3.0);
        assert_eq!(agg[1].completed, 1);
        assert_eq!(agg[1].min_lap_fraction, 0.1);
        assert_eq!(agg[0].mean_lap_fraction, 1.0);
    }

    #[test]
    fn permutation_is_seeded_and_not_identity() {
        let p = beam_permutation(19, 4);
        assert_eq!(p, beam_permutation(19, 4));
        assert_ne!(p, (0..19).collect::<Vec<_>>());
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..19).collect::<Vec<_>>());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn config_rejects_empty_seeds_and_unknown_tracks() {
        let cfg = ExperimentConfig {
            seeds: vec![],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            eval_tracks: vec!["no-such-track".into()],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
