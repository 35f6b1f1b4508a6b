//! Closed-loop episode execution at the physics rate, with off-track and lap
//! completion detection and a per-step trajectory log.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::forest::PredictionStats;
use crate::lidar::{Lidar, LidarConfig, LidarScan};
use crate::supervisor::ControlSource;
use crate::track::{TrackFrame, TrackGeometry};
use crate::vehicle::{step, ControlCommand, SimConfig, VehicleState};
use crate::{Error, Result};

/// What a controller sees at each physics step.
pub struct Observation<'a> {
    pub step: u64,
    pub t: f64,
    pub dt: f64,
    pub state: &'a VehicleState,
    pub frame: &'a TrackFrame,
    pub scan: &'a LidarScan,
    pub track: &'a TrackGeometry,
    /// Human steering override, when one is active.
    pub human: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub cmd: ControlCommand,
    pub source: ControlSource,
    pub stats: Option<PredictionStats>,
}

pub trait Controller {
    fn decide(&mut self, obs: &Observation<'_>) -> Decision;
}

impl<C: Controller + ?Sized> Controller for Box<C> {
    fn decide(&mut self, obs: &Observation<'_>) -> Decision {
        (**self).decide(obs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub sim: SimConfig,
    pub lidar: LidarConfig,
    pub initial_speed: f64,
    /// Laps to complete before `lap_complete` fires.
    pub laps: f64,
    pub max_steps: u64,
    /// Keep every n-th step in the log; 0 keeps none.
    pub record_every: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            sim: SimConfig::default(),
            lidar: LidarConfig::default(),
            initial_speed: 26.82,
            laps: 1.0,
            max_steps: 2_000_000,
            record_every: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalEvent {
    LapComplete,
    OffTrack,
    Timeout,
    /// The controller produced a non-finite command.
    Aborted,
}

impl TerminalEvent {
    pub fn as_str(&self) -> &'static str {
        match self {
            TerminalEvent::LapComplete => "lap_complete",
            TerminalEvent::OffTrack => "off_track",
            TerminalEvent::Timeout => "timeout",
            TerminalEvent::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub t: f64,
    pub state: VehicleState,
    pub cmd: ControlCommand,
    pub frame: TrackFrame,
    pub source: ControlSource,
    pub stats: Option<PredictionStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub track: String,
    pub terminal: TerminalEvent,
    pub lap_fraction: f64,
    pub steps: u64,
    pub sim_time_s: f64,
    pub max_abs_d: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub records: Vec<LogRecord>,
    pub summary: EpisodeSummary,
    pub final_state: VehicleState,
}

pub const LOG_HEADER: &str = "t,x,y,heading,speed,steer,accel,brake,s,d,source,sigma,cov,odd_count";

impl TrajectoryLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 160);
        out.push_str(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                r.state.x,
                r.state.y,
                r.state.heading,
                r.state.speed,
                r.cmd.steer,
                r.cmd.accel,
                r.cmd.brake,
                r.frame.s,
                r.frame.d,
                r.source.as_str()
            );
            match &r.stats {
                Some(s) => {
                    let _ = writeln!(out, ",{},{},{}", s.std, s.cov, s.odd_count);
                }
                None => out.push_str(",,,\n"),
            }
        }
        out
    }

    /// SHA-256 of the CSV serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.summary).map_err(|e| Error::parse("summary", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Incrementally stepped episode. `run_episode` drives it to completion;
/// the telemetry server steps it in real time.
pub struct Episode<'t> {
    track: &'t TrackGeometry,
    cfg: EpisodeConfig,
    lidar: Lidar,
    state: VehicleState,
    frame: TrackFrame,
    step: u64,
    progress: f64,
    max_progress: f64,
    max_abs_d: f64,
    records: Vec<LogRecord>,
    terminal: Option<TerminalEvent>,
    diagnostic: Option<String>,
    last_scan: LidarScan,
    last_decision: Option<Decision>,
}

impl<'t> Episode<'t> {
    /// Starts on the centerline at `s = 0`, aligned with the tangent.
    pub fn new(track: &'t TrackGeometry, cfg: EpisodeConfig) -> Result<Self> {
        cfg.sim.validate()?;
        if !(cfg.laps > 0.0) {
            return Err(Error::Config("laps must be positive".into()));
        }
        if !(cfg.initial_speed >= 0.0) {
            return Err(Error::Config("initial_speed must be non-negative".into()));
        }
        let lidar = Lidar::new(cfg.lidar.clone())?;
        let start = track.point_at(0.0);
        let state = VehicleState {
            x: start.x,
            y: start.y,
            heading: track.heading_at(0.0),
            speed: cfg.initial_speed.min(cfg.sim.max_speed),
        };
        let frame = track.project(state.position());
        Ok(Episode {
            track,
            cfg,
            lidar,
            state,
            frame,
            step: 0,
            progress: 0.0,
            max_progress: 0.0,
            max_abs_d: frame.d.abs(),
            records: Vec::new(),
            terminal: None,
            diagnostic: None,
            last_scan: LidarScan::new(Vec::new()),
            last_decision: None,
        })
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn frame(&self) -> &TrackFrame {
        &self.frame
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.sim.dt
    }

    pub fn terminal(&self) -> Option<TerminalEvent> {
        self.terminal
    }

    /// Scan observed at the most recent step.
    pub fn last_scan(&self) -> &LidarScan {
        &self.last_scan
    }

    /// Clamped decision applied at the most recent step.
    pub fn last_decision(&self) -> Option<&Decision> {
        self.last_decision.as_ref()
    }

    /// Laps completed so far (signed progress).
    pub fn progress_laps(&self) -> f64 {
        self.progress / self.track.total_length()
    }

    pub fn lap_fraction(&self) -> f64 {
        (self.max_progress / self.track.total_length()).clamp(0.0, self.cfg.laps)
    }

    pub fn track(&self) -> &TrackGeometry {
        self.track
    }

    /// Advances one physics step. `human` replaces the steering command when
    /// present. Returns the terminal event once the episode has ended.
    pub fn step<C: Controller + ?Sized>(&mut self, controller: &mut C, human: Option<f64>) -> Option<TerminalEvent> {
        if self.terminal.is_some() {
            return self.terminal;
        }
        let dt = self.cfg.sim.dt;
        let t = self.time();
        self.last_scan = self.lidar.scan_on_track(&self.state, self.track);
        let human = human.map(|h| h.clamp(-1.0, 1.0));
        let obs = Observation {
            step: self.step,
            t,
            dt,
            state: &self.state,
            frame: &self.frame,
            scan: &self.last_scan,
            track: self.track,
            human,
        };
        let mut decision = controller.decide(&obs);
        if !decision.cmd.is_finite() {
            self.diagnostic = Some(format!(
                "controller produced non-finite command {:?} at step {}",
                decision.cmd, self.step
            ));
            self.terminal = Some(TerminalEvent::Aborted);
            return self.terminal;
        }
        if let Some(h) = human {
            if decision.source != ControlSource::HumanOverride {
                decision.cmd.steer = h;
                decision.source = ControlSource::HumanOverride;
            }
        }
        decision.cmd = decision.cmd.clamped();

        if self.cfg.record_every > 0 && self.step % self.cfg.record_every == 0 {
            self.records.push(LogRecord {
                step: self.step,
                t,
                state: self.state,
                cmd: decision.cmd,
                frame: self.frame,
                source: decision.source,
                stats: decision.stats.clone(),
            });
        }

        self.state = step(&self.state, &decision.cmd, &self.cfg.sim);
        self.last_decision = Some(decision);
        self.step += 1;

        let total = self.track.total_length();
        let new_frame = self.track.project(self.state.position());
        let mut delta = new_frame.s - self.frame.s;
        if delta > total / 2.0 {
            delta -= total;
        } else if delta <= -total / 2.0 {
            delta += total;
        }
        self.progress += delta;
        self.max_progress = self.max_progress.max(self.progress);
        self.frame = new_frame;
        self.max_abs_d = self.max_abs_d.max(new_frame.d.abs());

        if new_frame.d.abs() >= self.track.half_width() {
            self.terminal = Some(TerminalEvent::OffTrack);
        } else if self.progress >= self.cfg.laps * total {
            self.terminal = Some(TerminalEvent::LapComplete);
        } else if self.step >= self.cfg.max_steps {
            self.terminal = Some(TerminalEvent::Timeout);
        }
        self.terminal
    }

    pub fn finish(self) -> TrajectoryLog {
        let lap_fraction = self.lap_fraction();
        TrajectoryLog {
            summary: EpisodeSummary {
                track: self.track.name().to_string(),
                terminal: self.terminal.unwrap_or(TerminalEvent::Timeout),
                lap_fraction,
                steps: self.step,
                sim_time_s: self.time(),
                max_abs_d: self.max_abs_d,
                diagnostic: self.diagnostic,
            },
            records: self.records,
            final_state: self.state,
        }
    }
}

/// Runs a controller from the start line until a terminal event.
pub fn run_episode<C: Controller + ?Sized>(
    controller: &mut C,
    track: &TrackGeometry,
    cfg: &EpisodeConfig,
) -> Result<TrajectoryLog> {
    let mut ep = Episode::new(track, cfg.clone())?;
    while ep.step(controller, None).is_none() {}
    Ok(ep.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::{circle_track, rectangle_track};

    struct ConstSteer(f64);

    impl Controller for ConstSteer {
        fn decide(&mut self, _obs: &Observation<'_>) -> Decision {
            Decision {
                cmd: ControlCommand::new(self.0, 0.0, 0.0),
                source: ControlSource::Learned,
                stats: None,
            }
        }
    }

    /// Steers exactly along a circle of known radius.
    struct CircleFollower {
        radius: f64,
        cfg: SimConfig,
    }

    impl Controller for CircleFollower {
        fn decide(&mut self, _obs: &Observation<'_>) -> Decision {
            let wheel = (self.cfg.wheelbase / self.radius).atan();
            Decision {
                cmd: ControlCommand::new(wheel / self.cfg.max_wheel_angle, 0.0, 0.0),
                source: ControlSource::Learned,
                stats: None,
            }
        }
    }

    struct NanSteer;

    impl Controller for NanSteer {
        fn decide(&mut self, obs: &Observation<'_>) -> Decision {
            let steer = if obs.step == 5 { f64::NAN } else { 0.0 };
            Decision {
                cmd: ControlCommand::new(steer, 0.0, 0.0),
                source: ControlSource::Learned,
                stats: None,
            }
        }
    }

    #[test]
    fn full_steer_leaves_track_quickly() {
        let track = rectangle_track("rect", 3000.0, 400.0, 300, 7.5).unwrap();
        let log = run_episode(&mut ConstSteer(1.0), &track, &EpisodeConfig::default()).unwrap();
        assert_eq!(log.summary.terminal, TerminalEvent::OffTrack);
        assert!(log.summary.lap_fraction < 0.05);
        assert!(log.summary.sim_time_s < 5.0);
    }

    #[test]
    fn exact_circle_follower_completes_lap() {
        let track = circle_track("ring", 150.0, 400, 7.5).unwrap();
        let cfg = EpisodeConfig { initial_speed: 20.0, ..Default::default() };
        let mut ctrl = CircleFollower { radius: 150.0, cfg: cfg.sim };
        let log = run_episode(&mut ctrl, &track, &cfg).unwrap();
        assert_eq!(log.summary.terminal, TerminalEvent::LapComplete);
        assert_eq!(log.summary.lap_fraction, 1.0);
        // timestamps advance by exactly one step each
        for w in log.records.windows(2) {
            assert!(w[1].t > w[0].t);
            assert_eq!(w[1].step, w[0].step + 1);
        }
    }

    #[test]
    fn deterministic_logs() {
        let track = circle_track("ring", 150.0, 400, 7.5).unwrap();
        let cfg = EpisodeConfig { max_steps: 3000, ..Default::default() };
        let a = run_episode(&mut ConstSteer(0.05), &track, &cfg).unwrap();
        let b = run_episode(&mut ConstSteer(0.05), &track, &cfg).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn nonfinite_command_aborts() {
        let track = circle_track("ring", 150.0, 400, 7.5).unwrap();
        let log = run_episode(&mut NanSteer, &track, &EpisodeConfig::default()).unwrap();
        assert_eq!(log.summary.terminal, TerminalEvent::Aborted);
        assert_eq!(log.summary.steps, 5);
        assert!(log.summary.diagnostic.unwrap().contains("non-finite"));
    }

    #[test]
    fn timeout_and_csv_shape() {
        let track = circle_track("ring", 150.0, 400, 7.5).unwrap();
        let cfg = EpisodeConfig { max_steps: 10, ..Default::default() };
        let log = run_episode(&mut ConstSteer(0.0), &track, &cfg).unwrap();
        assert_eq!(log.summary.terminal, TerminalEvent::Timeout);
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 11);
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines[1].split(',').count(), 14);
    }

    #[test]
    fn human_override_replaces_steer() {
        let track = circle_track("ring", 150.0, 400, 7.5).unwrap();
        let mut ep = Episode::new(&track, EpisodeConfig::default()).unwrap();
        let mut ctrl = ConstSteer(0.0);
        ep.step(&mut ctrl, Some(0.3));
        ep.step(&mut ctrl, None);
        let log = ep.finish();
        assert_eq!(log.records[0].source, ControlSource::HumanOverride);
        assert_eq!(log.records[0].cmd.steer, 0.3);
        assert_eq!(log.records[1].source, ControlSource::Learned);
    }
}
