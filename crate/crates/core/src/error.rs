use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },
    #[error("invalid track: {0}")]
    InvalidTrack(String),
    #[error("track generation failed for seed {seed} after {attempts} attempts: {reason}")]
    TrackGeneration {
        seed: u64,
        attempts: usize,
        reason: String,
    },
    #[error("position is outside the track corridor (|d| = {offset:.3} m >= half width {half_width} m)")]
    OffTrack { offset: f64, half_width: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("expert left the track during collection (lap {lap}, step {step})")]
    ExpertCrashed { lap: usize, step: u64 },
    #[error("beam count mismatch: expected {expected}, got {actual}")]
    BeamCount { expected: usize, actual: usize },
    #[error("model file error: {0}")]
    Model(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("missing artifact {path}; produce it with `latctl {producer}`")]
    MissingArtifact { path: PathBuf, producer: String },
    #[error("telemetry error: {0}")]
    Telemetry(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }
}
