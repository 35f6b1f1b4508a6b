//! Controllers that plug into [`crate::episode`]: the PID expert, a learned
//! steering model with PID speed hold, and the supervised forest driver.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{Controller, Decision, Observation};
use crate::forest::{load_forest, Forest, PredictionStats};
use crate::mlp::{load_mlp, Mlp};
use crate::pid::{expert_command, ExpertConfig, ExpertState};
use crate::supervisor::{ControlSource, RunStats, Supervisor, SupervisorConfig};
use crate::vehicle::ControlCommand;
use crate::{Error, Result};

/// A regressor from a LIDAR scan to normalized steering.
pub trait SteeringModel: Send + Sync {
    fn n_inputs(&self) -> usize;
    /// Steering prediction plus ensemble statistics when the model has them.
    fn steer(&self, scan: &[f64], eps: f64) -> Result<(f64, Option<PredictionStats>)>;
}

impl SteeringModel for Forest {
    fn n_inputs(&self) -> usize {
        self.n_features()
    }

    fn steer(&self, scan: &[f64], eps: f64) -> Result<(f64, Option<PredictionStats>)> {
        let stats = self.predict_with_stats(scan, eps)?;
        Ok((stats.mean, Some(stats)))
    }
}

impl SteeringModel for Mlp {
    fn n_inputs(&self) -> usize {
        self.input_dim()
    }

    fn steer(&self, scan: &[f64], _eps: f64) -> Result<(f64, Option<PredictionStats>)> {
        Ok((self.predict(scan)?, None))
    }
}

impl<M: SteeringModel + ?Sized> SteeringModel for Arc<M> {
    fn n_inputs(&self) -> usize {
        (**self).n_inputs()
    }

    fn steer(&self, scan: &[f64], eps: f64) -> Result<(f64, Option<PredictionStats>)> {
        (**self).steer(scan, eps)
    }
}

/// A model file of either kind.
pub enum AnyModel {
    Forest(Forest),
    Mlp(Mlp),
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Forest(_) => "random_forest",
            AnyModel::Mlp(_) => "mlp",
        }
    }
}

/// Loads a forest or MLP model file, dispatching on its `kind` field.
pub fn load_model(path: impl AsRef<Path>) -> Result<AnyModel> {
    #[derive(Deserialize)]
    struct Kind {
        kind: String,
    }
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    de.disable_recursion_limit();
    let k = Kind::deserialize(&mut de).map_err(|e| Error::parse(path.display().to_string(), e))?;
    match k.kind.as_str() {
        "random_forest_regressor" => Ok(AnyModel::Forest(load_forest(path)?)),
        "mlp_regressor" => Ok(AnyModel::Mlp(load_mlp(path)?)),
        other => Err(Error::Model(format!("unknown model kind {other:?} in {}", path.display()))),
    }
}

/// Piecewise-constant lateral reference used to excite the expert during
/// data collection. Every `hold_s` seconds the target jumps to a fresh
/// uniform draw in `[-amplitude_m, amplitude_m]`, so the recorded states
/// include off-center positions and the corrective steering that recovers
/// from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneOffsetProfile {
    pub amplitude_m: f64,
    pub hold_s: f64,
    pub seed: u64,
}

impl LaneOffsetProfile {
    pub fn seeded(amplitude_m: f64, hold_s: f64, seed: u64) -> Self {
        LaneOffsetProfile {
            amplitude_m,
            hold_s,
            seed,
        }
    }

    /// Target offset at simulation time `t`; zero during the first hold.
    pub fn at(&self, t: f64) -> f64 {
        let k = (t / self.hold_s).floor();
        if k < 1.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k as u64);
        rng.gen_range(-self.amplitude_m..=self.amplitude_m)
    }
}

#[derive(Debug, Clone)]
pub struct ExpertDriver {
    cfg: ExpertConfig,
    target_speed: f64,
    state: ExpertState,
    lane_offset: Option<LaneOffsetProfile>,
}

impl ExpertDriver {
    pub fn new(cfg: ExpertConfig, target_speed: f64) -> Self {
        ExpertDriver {
            cfg,
            target_speed,
            state: ExpertState::default(),
            lane_offset: None,
        }
    }

    pub fn with_lane_offset(mut self, profile: LaneOffsetProfile) -> Self {
        self.lane_offset = Some(profile);
        self
    }

    pub fn command(&mut self, obs: &Observation<'_>) -> ControlCommand {
        let lane = self.lane_offset.as_ref().map_or(0.0, |p| p.at(obs.t));
        expert_command(
            obs.state,
            obs.frame,
            obs.track,
            self.target_speed,
            &self.cfg,
            &mut self.state,
            obs.dt,
            lane,
        )
    }
}

impl Controller for ExpertDriver {
    fn decide(&mut self, obs: &Observation<'_>) -> Decision {
        Decision {
            cmd: self.command(obs),
            source: ControlSource::Expert,
            stats: None,
        }
    }
}

/// Learned steering with the expert's longitudinal PID.
pub struct LearnedDriver<M> {
    model: M,
    speed: ExpertDriver,
    eps: f64,
}

impl<M: SteeringModel> LearnedDriver<M> {
    pub fn new(model: M, expert: ExpertConfig, target_speed: f64, eps: f64) -> Self {
        LearnedDriver {
            model,
            speed: ExpertDriver::new(expert, target_speed),
            eps,
        }
    }
}

impl<M: SteeringModel> Controller for LearnedDriver<M> {
    fn decide(&mut self, obs: &Observation<'_>) -> Decision {
        let mut cmd = self.speed.command(obs);
        let (steer, stats) = match self.model.steer(obs.scan.as_slice(), self.eps) {
            Ok(v) => v,
            Err(_) => (f64::NAN, None),
        };
        cmd.steer = steer;
        Decision {
            cmd,
            source: ControlSource::Learned,
            stats,
        }
    }
}

/// Forest steering arbitrated against the PID expert and human overrides.
pub struct SupervisedDriver {
    forest: Arc<Forest>,
    expert: ExpertDriver,
    supervisor: Supervisor,
}

impl SupervisedDriver {
    pub fn new(
        forest: Arc<Forest>,
        expert: ExpertConfig,
        target_speed: f64,
        cfg: SupervisorConfig,
    ) -> Result<Self> {
        Ok(SupervisedDriver {
            forest,
            expert: ExpertDriver::new(expert, target_speed),
            supervisor: Supervisor::new(cfg)?,
        })
    }

    pub fn run_stats(&self) -> &RunStats {
        self.supervisor.stats()
    }

    pub fn into_run_stats(self) -> RunStats {
        self.supervisor.into_stats()
    }
}

impl Controller for SupervisedDriver {
    fn decide(&mut self, obs: &Observation<'_>) -> Decision {
        let fallback = self.expert.command(obs);
        let eps = self.supervisor.config().eps;
        let stats = match self.forest.predict_with_stats(obs.scan.as_slice(), eps) {
            Ok(s) => s,
            Err(_) => {
                return Decision {
                    cmd: ControlCommand::new(f64::NAN, 0.0, 0.0),
                    source: ControlSource::Learned,
                    stats: None,
                }
            }
        };
        let learned = ControlCommand { steer: stats.mean, ..fallback };
        let human = obs.human.map(|h| ControlCommand { steer: h, ..fallback });
        let (cmd, source) = self.supervisor.step(&stats, learned, fallback, human);
        Decision {
            cmd,
            source,
            stats: Some(stats),
        }
    }
}
