//! The labeled scan → steering dataset: collection from expert rollouts,
//! seeded splits, and CSV persistence with a JSON metadata sidecar.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::driver::{ExpertDriver, LaneOffsetProfile};
use crate::episode::{Episode, EpisodeConfig, TerminalEvent};
use crate::forest::FeatureMatrix;
use crate::lidar::LidarScan;
use crate::pid::ExpertConfig;
use crate::track::TrackGeometry;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub scan: LidarScan,
    /// Normalized steering applied by the expert, in [-1, 1].
    pub steer: f64,
}

/// Sidecar metadata. Field names are the on-disk schema.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub track: String,
    pub beam_count: usize,
    pub max_range_m: f64,
    pub record_hz: f64,
    pub target_speed_mps: f64,
    pub seed: u64,
    pub laps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(meta: DatasetMeta, samples: Vec<Sample>) -> Result<Self> {
        let d = Dataset { meta, samples };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            s.scan
                .validate(self.meta.beam_count, self.meta.max_range_m)
                .map_err(|e| Error::Dataset(format!("row {i}: {e}")))?;
            if !(s.steer.is_finite() && (-1.0..=1.0).contains(&s.steer)) {
                return Err(Error::Dataset(format!(
                    "row {i}: steering label {} outside [-1, 1]",
                    s.steer
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_matrix(&self) -> FeatureMatrix {
        let rows: Vec<&[f64]> = self.samples.iter().map(|s| s.scan.as_slice()).collect();
        FeatureMatrix::from_rows(&rows)
    }

    pub fn targets(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.steer).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Seeded uniform random subsample of `n` rows (all rows when `n >= len`),
    /// kept in original order.
    pub fn subsample(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        self.subset(&idx)
    }

    /// SHA-256 over the CSV body and metadata.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&self.meta).expect("meta serializes").as_bytes());
        h.update(self.to_csv().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::with_capacity(self.samples.len() * self.meta.beam_count * 20);
        for i in 0..self.meta.beam_count {
            let _ = write!(out, "d{i},");
        }
        out.push_str("steer\n");
        for s in &self.samples {
            for v in s.scan.as_slice() {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{}", s.steer);
        }
        out
    }

    pub fn save(&self, csv_path: impl AsRef<Path>) -> Result<()> {
        let csv_path = csv_path.as_ref();
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let meta_path = sidecar_path(csv_path);
        let meta = serde_json::to_string_pretty(&self.meta).map_err(|e| Error::parse("metadata", e))?;
        std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(csv_path: impl AsRef<Path>) -> Result<Dataset> {
        let csv_path = csv_path.as_ref();
        let meta_path = sidecar_path(csv_path);
        if !meta_path.exists() {
            return Err(Error::Dataset(format!(
                "metadata sidecar not found; expected {}",
                meta_path.display()
            )));
        }
        let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta =
            serde_json::from_str(&meta_text).map_err(|e| Error::parse(meta_path.display().to_string(), e))?;

        let mut reader = csv::Reader::from_path(csv_path).map_err(|e| Error::parse(csv_path.display().to_string(), e))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::parse(csv_path.display().to_string(), e))?
            .clone();
        if headers.len() != meta.beam_count + 1 {
            return Err(Error::BeamCount {
                expected: meta.beam_count,
                actual: headers.len().saturating_sub(1),
            });
        }
        for (i, h) in headers.iter().enumerate() {
            let expected = if i == meta.beam_count { "steer".to_string() } else { format!("d{i}") };
            if h != expected {
                return Err(Error::Dataset(format!("unexpected column {h:?}, expected {expected:?}")));
            }
        }
        let mut samples = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Dataset(format!("row {row}: {e}")))?;
            let values: Vec<f64> = record
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Dataset(format!("row {row}: {e}")))?;
            let (scan, steer) = values.split_at(meta.beam_count);
            samples.push(Sample {
                scan: LidarScan::new(scan.to_vec()),
                steer: steer[0],
            });
        }
        Dataset::new(meta, samples)
    }
}

/// `dataset.csv` → `dataset.meta.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.meta.json"))
}

/// Seeded random partition into sizes `ceil(f * n)` and `n - ceil(f * n)`.
pub fn split(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(d.len(), train_fraction, seed)?;
    Ok((d.subset(&train), d.subset(&test)))
}

pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = ((train_fraction * n as f64).ceil() as usize).min(n);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    /// Recorded laps, after one discarded warm-up lap.
    pub laps: usize,
    pub record_hz: f64,
    pub target_speed_mps: f64,
    pub seed: u64,
    /// Amplitude of the expert's lane-offset excitation (m); 0 disables it.
    pub lane_offset_amplitude_m: f64,
    pub lane_offset_hold_s: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            laps: 3,
            record_hz: 50.0,
            target_speed_mps: 26.82,
            seed: 7,
            lane_offset_amplitude_m: 3.0,
            lane_offset_hold_s: 3.0,
        }
    }
}

/// Drives the expert for `laps + 1` laps and records one sample per
/// recording tick after the warm-up lap.
pub fn collect(
    track: &TrackGeometry,
    expert: &ExpertConfig,
    cfg: &CollectConfig,
    episode: &EpisodeConfig,
) -> Result<Dataset> {
    if cfg.laps == 0 {
        return Err(Error::Dataset("laps must be at least 1 (empty dataset)".into()));
    }
    let decimation = (1.0 / (episode.sim.dt * cfg.record_hz)).round() as u64;
    if decimation == 0 {
        return Err(Error::Config("record_hz exceeds the physics rate".into()));
    }
    let mut driver = ExpertDriver::new(expert.clone(), cfg.target_speed_mps);
    if cfg.lane_offset_amplitude_m > 0.0 {
        driver = driver.with_lane_offset(LaneOffsetProfile::seeded(
            cfg.lane_offset_amplitude_m,
            cfg.lane_offset_hold_s,
            cfg.seed,
        ));
    }
    let ep_cfg = EpisodeConfig {
        laps: (cfg.laps + 1) as f64,
        record_every: 0,
        initial_speed: cfg.target_speed_mps,
        ..episode.clone()
    };
    let mut ep = Episode::new(track, ep_cfg)?;
    let mut samples = Vec::new();
    loop {
        let lap = ep.progress_laps().floor().max(0.0) as usize;
        let tick = ep.step_index() % decimation == 0;
        let terminal = ep.step(&mut driver, None);
        if tick && lap >= 1 {
            if let Some(d) = ep.last_decision() {
                samples.push(Sample {
                    scan: ep.last_scan().clone(),
                    steer: d.cmd.steer,
                });
            }
        }
        match terminal {
            None => {}
            Some(TerminalEvent::LapComplete) => break,
            Some(_) => {
                return Err(Error::ExpertCrashed {
                    lap,
                    step: ep.step_index(),
                })
            }
        }
    }
    let meta = DatasetMeta {
        track: track.name().to_string(),
        beam_count: episode.lidar.beam_count,
        max_range_m: episode.lidar.max_range,
        record_hz: cfg.record_hz,
        target_speed_mps: cfg.target_speed_mps,
        seed: cfg.seed,
        laps: cfg.laps,
    };
    Dataset::new(meta, samples)
}
