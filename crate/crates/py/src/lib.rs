//! Python bindings: tracks, data collection, forest and MLP training,
//! ensemble statistics, supervised driving and the evaluation protocol.

use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use latctl::dataset::{self, CollectConfig};
use latctl::driver::{ExpertDriver, LearnedDriver, SupervisedDriver};
use latctl::episode::{run_episode, EpisodeConfig, TrajectoryLog};
use latctl::experiment::{self, ExperimentConfig};
use latctl::forest::{self, ForestConfig, DEFAULT_COV_EPS};
use latctl::mlp::{self, TrainConfig};
use latctl::pid::ExpertConfig;
use latctl::supervisor::{self, ControlSource, SupervisorConfig};
use latctl::track::{self, TrackGeometry};
use latctl::trackgen;
use latctl::vehicle::ControlCommand;
use latctl::Error;

const SPEED: f64 = 26.82;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::MissingArtifact { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Track {
    inner: Arc<TrackGeometry>,
}

#[pymethods]
impl Track {
    /// Bundled preset ("train-a", "eval-b") or a track JSON path.
    #[staticmethod]
    fn load(name_or_path: &str) -> PyResult<Self> {
        let inner = trackgen::resolve_track(name_or_path).map_err(py_err)?;
        Ok(Track { inner: Arc::new(inner) })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        track::save_track(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn length(&self) -> f64 {
        self.inner.total_length()
    }

    #[getter]
    fn half_width(&self) -> f64 {
        self.inner.half_width()
    }

    /// `(s, d)` of a point: arc length and signed lateral offset (left positive).
    fn project(&self, x: f64, y: f64) -> (f64, f64) {
        let f = self.inner.project(latctl::Vec2::new(x, y));
        (f.s, f.d)
    }

    fn centerline(&self) -> Vec<(f64, f64)> {
        self.inner.waypoints().iter().map(|p| (p.x, p.y)).collect()
    }
}

#[pyclass(frozen)]
pub struct Dataset {
    inner: Arc<dataset::Dataset>,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = dataset::Dataset::load(path).map_err(py_err)?;
        Ok(Dataset { inner: Arc::new(inner) })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn beam_count(&self) -> usize {
        self.inner.meta.beam_count
    }

    fn scans(&self) -> Vec<Vec<f64>> {
        self.inner.samples.iter().map(|s| s.scan.distances.clone()).collect()
    }

    fn targets(&self) -> Vec<f64> {
        self.inner.targets()
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    /// Seeded `(train, holdout)` split.
    fn split(&self, train_fraction: f64, seed: u64) -> PyResult<(Dataset, Dataset)> {
        let (a, b) = dataset::split(&self.inner, train_fraction, seed).map_err(py_err)?;
        Ok((Dataset { inner: Arc::new(a) }, Dataset { inner: Arc::new(b) }))
    }

    fn subsample(&self, n: usize, seed: u64) -> Dataset {
        Dataset {
            inner: Arc::new(self.inner.subsample(n, seed)),
        }
    }
}

/// Records the PID expert on `track` after one warm-up lap.
#[pyfunction]
#[pyo3(signature = (track, laps = 3, seed = 7, lane_offset_amplitude_m = 3.0))]
fn collect(track: &Track, laps: usize, seed: u64, lane_offset_amplitude_m: f64) -> PyResult<Dataset> {
    let cfg = CollectConfig {
        laps,
        seed,
        lane_offset_amplitude_m,
        ..CollectConfig::default()
    };
    let d = dataset::collect(&track.inner, &ExpertConfig::default(), &cfg, &EpisodeConfig::default()).map_err(py_err)?;
    Ok(Dataset { inner: Arc::new(d) })
}

#[pyclass(frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
pub struct Stats {
    mean: f64,
    std: f64,
    cov: f64,
    odd_count: usize,
}

#[pymethods]
impl Stats {
    fn __repr__(&self) -> String {
        format!(
            "Stats(mean={}, std={}, cov={}, odd_count={})",
            self.mean, self.std, self.cov, self.odd_count
        )
    }
}

impl From<&forest::PredictionStats> for Stats {
    fn from(s: &forest::PredictionStats) -> Self {
        Stats {
            mean: s.mean,
            std: s.std,
            cov: s.cov,
            odd_count: s.odd_count,
        }
    }
}

/// Ensemble statistics of raw per-tree outputs.
#[pyfunction]
#[pyo3(signature = (outputs, eps = DEFAULT_COV_EPS))]
fn ensemble_stats(outputs: Vec<f64>, eps: f64) -> PyResult<Stats> {
    if outputs.is_empty() {
        return Err(PyValueError::new_err("no tree outputs"));
    }
    Ok(Stats::from(&forest::PredictionStats::from_outputs(&outputs, eps)))
}

#[pyclass(frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
pub struct EpisodeResult {
    terminal: String,
    lap_fraction: f64,
    steps: u64,
    sim_time_s: f64,
    max_abs_d: f64,
    log_hash: String,
}

#[pymethods]
impl EpisodeResult {
    fn __repr__(&self) -> String {
        format!(
            "EpisodeResult(terminal={:?}, lap_fraction={:.3}, max_abs_d={:.3})",
            self.terminal, self.lap_fraction, self.max_abs_d
        )
    }
}

impl From<TrajectoryLog> for EpisodeResult {
    fn from(log: TrajectoryLog) -> Self {
        EpisodeResult {
            log_hash: log.hash(),
            terminal: log.summary.terminal.as_str().to_string(),
            lap_fraction: log.summary.lap_fraction,
            steps: log.summary.steps,
            sim_time_s: log.summary.sim_time_s,
            max_abs_d: log.summary.max_abs_d,
        }
    }
}

fn episode() -> EpisodeConfig {
    EpisodeConfig {
        record_every: 0,
        ..EpisodeConfig::default()
    }
}

#[pyfunction]
fn drive_expert(py: Python<'_>, track: &Track) -> PyResult<EpisodeResult> {
    let t = track.inner.clone();
    py.detach(move || {
        let mut d = ExpertDriver::new(ExpertConfig::default(), SPEED);
        run_episode(&mut d, &t, &episode()).map(EpisodeResult::from)
    })
    .map_err(py_err)
}

#[pyclass(frozen)]
pub struct Forest {
    inner: Arc<forest::Forest>,
}

#[pymethods]
impl Forest {
    #[staticmethod]
    #[pyo3(signature = (data, n_trees = 100, min_impurity_decrease = 0.001, seed = 0))]
    fn fit(py: Python<'_>, data: &Dataset, n_trees: usize, min_impurity_decrease: f64, seed: u64) -> PyResult<Self> {
        let cfg = ForestConfig {
            n_trees,
            min_impurity_decrease,
            seed,
            ..ForestConfig::default()
        };
        let d = data.inner.clone();
        let f = py.detach(move || forest::fit_forest(&d, &cfg)).map_err(py_err)?;
        Ok(Forest { inner: Arc::new(f) })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = forest::load_forest(path).map_err(py_err)?;
        Ok(Forest { inner: Arc::new(f) })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        forest::save_forest(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn n_trees(&self) -> usize {
        self.inner.n_trees()
    }

    fn predict(&self, scan: Vec<f64>) -> PyResult<f64> {
        self.inner.predict(&scan).map_err(py_err)
    }

    fn tree_outputs(&self, scan: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.tree_outputs(&scan).map_err(py_err)
    }

    #[pyo3(signature = (scan, eps = DEFAULT_COV_EPS))]
    fn predict_with_stats(&self, scan: Vec<f64>, eps: f64) -> PyResult<Stats> {
        let s = self.inner.predict_with_stats(&scan, eps).map_err(py_err)?;
        Ok(Stats::from(&s))
    }

    /// `(cov_on, cov_off)` from a quantile of held-out CoV.
    #[pyo3(signature = (holdout, quantile = 0.999, eps = DEFAULT_COV_EPS))]
    fn calibrate(&self, holdout: &Dataset, quantile: f64, eps: f64) -> PyResult<(f64, f64)> {
        let c = supervisor::calibrate_threshold(&self.inner, &holdout.inner, quantile, eps).map_err(py_err)?;
        Ok((c.cov_on, c.cov_off))
    }

    fn drive(&self, py: Python<'_>, track: &Track) -> PyResult<EpisodeResult> {
        let (f, t) = (self.inner.clone(), track.inner.clone());
        py.detach(move || {
            let mut d = LearnedDriver::new(f, ExpertConfig::default(), SPEED, DEFAULT_COV_EPS);
            run_episode(&mut d, &t, &episode()).map(EpisodeResult::from)
        })
        .map_err(py_err)
    }

    /// Drives with CoV arbitration; returns the episode and the intervention count.
    #[pyo3(signature = (track, cov_on, cov_off, min_fallback_steps = 250))]
    fn drive_supervised(
        &self,
        py: Python<'_>,
        track: &Track,
        cov_on: f64,
        cov_off: f64,
        min_fallback_steps: u64,
    ) -> PyResult<(EpisodeResult, u64)> {
        let cfg = SupervisorConfig {
            cov_on,
            cov_off,
            min_fallback_steps,
            eps: DEFAULT_COV_EPS,
        };
        let (f, t) = (self.inner.clone(), track.inner.clone());
        py.detach(move || {
            let mut d = SupervisedDriver::new(f, ExpertConfig::default(), SPEED, cfg)?;
            let log = run_episode(&mut d, &t, &episode())?;
            Ok((EpisodeResult::from(log), d.into_run_stats().interventions))
        })
        .map_err(py_err)
    }
}

#[pyclass(frozen)]
pub struct Mlp {
    inner: Arc<mlp::Mlp>,
}

#[pymethods]
impl Mlp {
    #[staticmethod]
    #[pyo3(signature = (data, hidden = vec![256, 128, 64, 32, 16], max_epochs = 500, seed = 0))]
    fn fit(py: Python<'_>, data: &Dataset, hidden: Vec<usize>, max_epochs: usize, seed: u64) -> PyResult<Self> {
        let cfg = TrainConfig {
            hidden,
            max_epochs,
            seed,
            ..TrainConfig::default()
        };
        let d = data.inner.clone();
        let (m, _) = py.detach(move || mlp::train(&d, &cfg)).map_err(py_err)?;
        Ok(Mlp { inner: Arc::new(m) })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let m = mlp::load_mlp(path).map_err(py_err)?;
        Ok(Mlp { inner: Arc::new(m) })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        mlp::save_mlp(&self.inner, path).map_err(py_err)
    }

    fn predict(&self, scan: Vec<f64>) -> PyResult<f64> {
        self.inner.predict(&scan).map_err(py_err)
    }

    fn drive(&self, py: Python<'_>, track: &Track) -> PyResult<EpisodeResult> {
        let (m, t) = (self.inner.clone(), track.inner.clone());
        py.detach(move || {
            let mut d = LearnedDriver::new(m, ExpertConfig::default(), SPEED, DEFAULT_COV_EPS);
            run_episode(&mut d, &t, &episode()).map(EpisodeResult::from)
        })
        .map_err(py_err)
    }
}

/// Stateful CoV arbitration, one call per control step.
#[pyclass]
pub struct Supervisor {
    inner: supervisor::Supervisor,
}

#[pymethods]
impl Supervisor {
    #[new]
    #[pyo3(signature = (cov_on, cov_off, min_fallback_steps = 250, eps = DEFAULT_COV_EPS))]
    fn new(cov_on: f64, cov_off: f64, min_fallback_steps: u64, eps: f64) -> PyResult<Self> {
        let inner = supervisor::Supervisor::new(SupervisorConfig {
            cov_on,
            cov_off,
            min_fallback_steps,
            eps,
        })
        .map_err(py_err)?;
        Ok(Supervisor { inner })
    }

    /// Returns the active source name for this step.
    #[pyo3(signature = (outputs, human = false))]
    fn step(&mut self, outputs: Vec<f64>, human: bool) -> PyResult<String> {
        if outputs.is_empty() {
            return Err(PyValueError::new_err("no tree outputs"));
        }
        let eps = self.inner.config().eps;
        let stats = forest::PredictionStats::from_outputs(&outputs, eps);
        let c = ControlCommand::new(0.0, 0.0, 0.0);
        let (_, src): (_, ControlSource) = self.inner.step(&stats, c, c, human.then_some(c));
        Ok(src.as_str().to_string())
    }

    #[getter]
    fn interventions(&self) -> u64 {
        self.inner.stats().interventions
    }

    #[getter]
    fn total_odd_counts(&self) -> u64 {
        self.inner.stats().total_odd_counts
    }
}

/// Default experiment config as TOML.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_toml()
}

/// Runs the evaluation protocol from TOML text; writes artifacts to `out_dir`
/// when given and returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config_toml, out_dir = None))]
fn evaluate(py: Python<'_>, config_toml: &str, out_dir: Option<String>) -> PyResult<String> {
    let cfg = ExperimentConfig::from_toml(config_toml).map_err(py_err)?;
    py.detach(move || {
        let out = experiment::evaluate(&cfg)?;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone().into(),
                source: e,
            })?;
            experiment::write_outputs(&out, &cfg, &dir)?;
        }
        Ok(out.report.to_json())
    })
    .map_err(py_err)
}

#[pymodule]
fn pylatctl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Track>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Stats>()?;
    m.add_class::<EpisodeResult>()?;
    m.add_class::<Forest>()?;
    m.add_class::<Mlp>()?;
    m.add_class::<Supervisor>()?;
    m.add_function(wrap_pyfunction!(collect, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_stats, m)?)?;
    m.add_function(wrap_pyfunction!(drive_expert, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
