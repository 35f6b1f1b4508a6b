//! Runtime arbitration between the learned steering command, the PID
//! fallback and a human override, driven by the forest's CoV.
//!
//! A human override always wins for exactly the steps it is present. Without
//! one, the supervisor leaves `Learned` when `cov > cov_on`, stays in fallback
//! for at least `min_fallback_steps`, and returns once `cov < cov_off`.
//! Odd counts are accumulated for reporting only.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::forest::{Forest, PredictionStats, DEFAULT_COV_EPS};
use crate::vehicle::ControlCommand;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSource {
    Learned,
    FallbackPid,
    HumanOverride,
    /// The PID expert driving on its own (data collection, reference runs).
    Expert,
}

impl ControlSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControlSource::Learned => "learned",
            ControlSource::FallbackPid => "fallback_pid",
            ControlSource::HumanOverride => "human_override",
            ControlSource::Expert => "expert",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisorConfig {
    pub cov_on: f64,
    pub cov_off: f64,
    pub min_fallback_steps: u64,
    pub eps: f64,
}

impl SupervisorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cov_off > 0.0 && self.cov_off < self.cov_on) {
            return Err(Error::Config(format!(
                "need 0 < cov_off < cov_on, got cov_off={} cov_on={}",
                self.cov_off, self.cov_on
            )));
        }
        if self.min_fallback_steps == 0 {
            return Err(Error::Config("min_fallback_steps must be at least 1".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SupervisorState {
    pub in_fallback: bool,
    pub steps_in_fallback: u64,
}

/// Pure arbitration step. Returns the command to apply, its source and the
/// next state.
pub fn arbitrate(
    stats: &PredictionStats,
    learned: ControlCommand,
    fallback: ControlCommand,
    human: Option<ControlCommand>,
    st: SupervisorState,
    cfg: &SupervisorConfig,
) -> (ControlCommand, ControlSource, SupervisorState) {
    let next = if st.in_fallback {
        if st.steps_in_fallback >= cfg.min_fallback_steps && stats.cov < cfg.cov_off {
            SupervisorState::default()
        } else {
            SupervisorState {
                in_fallback: true,
                steps_in_fallback: st.steps_in_fallback + 1,
            }
        }
    } else if stats.cov > cfg.cov_on {
        SupervisorState {
            in_fallback: true,
            steps_in_fallback: 1,
        }
    } else {
        st
    };
    if let Some(h) = human {
        return (h, ControlSource::HumanOverride, next);
    }
    if next.in_fallback {
        (fallback, ControlSource::FallbackPid, next)
    } else {
        (learned, ControlSource::Learned, next)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStat {
    pub steer: f64,
    pub sigma: f64,
    pub cov: f64,
    pub odd_count: usize,
    pub source: ControlSource,
}

/// Accumulated per-run statistics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunStats {
    pub steps: u64,
    /// Entries into a non-learned source.
    pub interventions: u64,
    pub total_odd_counts: u64,
    pub max_cov: f64,
    pub cov_sum: f64,
    pub last_source: Option<ControlSource>,
    pub series: Vec<StepStat>,
}

impl RunStats {
    pub fn record(&mut self, stats: &PredictionStats, source: ControlSource) {
        self.accumulate(stats, source);
        self.series.push(StepStat {
            steer: stats.mean,
            sigma: stats.std,
            cov: stats.cov,
            odd_count: stats.odd_count,
            source,
        });
    }

    /// Updates the totals without keeping the per-step series.
    pub fn accumulate(&mut self, stats: &PredictionStats, source: ControlSource) {
        let previous = self.last_source.unwrap_or(ControlSource::Learned);
        if previous == ControlSource::Learned && source != ControlSource::Learned {
            self.interventions += 1;
        }
        self.last_source = Some(source);
        self.steps += 1;
        self.total_odd_counts += stats.odd_count as u64;
        self.max_cov = self.max_cov.max(stats.cov);
        self.cov_sum += stats.cov;
    }

    pub fn mean_cov(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.cov_sum / self.steps as f64
        }
    }
}

/// Stateful wrapper owning the arbitration state and run statistics.
#[derive(Debug, Clone)]
pub struct Supervisor {
    cfg: SupervisorConfig,
    state: SupervisorState,
    stats: RunStats,
}

impl Supervisor {
    pub fn new(cfg: SupervisorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Supervisor {
            cfg,
            state: SupervisorState::default(),
            stats: RunStats::default(),
        })
    }

    pub fn config(&self) -> &SupervisorConfig {
        &self.cfg
    }

    pub fn state(&self) -> SupervisorState {
        self.state
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    pub fn into_stats(self) -> RunStats {
        self.stats
    }

    pub fn step(
        &mut self,
        stats: &PredictionStats,
        learned: ControlCommand,
        fallback: ControlCommand,
        human: Option<ControlCommand>,
    ) -> (ControlCommand, ControlSource) {
        let (cmd, source, next) = arbitrate(stats, learned, fallback, human, self.state, &self.cfg);
        self.state = next;
        self.stats.record(stats, source);
        (cmd, source)
    }
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Ratio of `cov_off` to `cov_on` set by calibration.
pub const COV_OFF_RATIO: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub cov_on: f64,
    pub cov_off: f64,
    pub quantile: f64,
    pub samples: usize,
}

/// Sets `cov_on` to the given quantile of CoV over the validation scans.
pub fn calibrate_threshold(forest: &Forest, val: &Dataset, q: f64, eps: f64) -> Result<Calibration> {
    if val.samples.is_empty() {
        return Err(Error::Calibration("validation set is empty".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Calibration(format!("quantile must be in (0, 1], got {q}")));
    }
    let covs = dataset_covs(forest, val, eps)?;
    calibrate_from_covs(&covs, q)
}

pub fn calibrate_from_covs(covs: &[f64], q: f64) -> Result<Calibration> {
    if covs.is_empty() {
        return Err(Error::Calibration("validation set is empty".into()));
    }
    if covs.iter().all(|c| *c == 0.0) {
        return Err(Error::Calibration(
            "every validation CoV is zero; use more trees or more training data".into(),
        ));
    }
    let cov_on = quantile(covs, q);
    Ok(Calibration {
        cov_on,
        cov_off: COV_OFF_RATIO * cov_on,
        quantile: q,
        samples: covs.len(),
    })
}

pub fn dataset_covs(forest: &Forest, data: &Dataset, eps: f64) -> Result<Vec<f64>> {
    data.samples
        .iter()
        .map(|s| forest.predict_with_stats(s.scan.as_slice(), eps).map(|p| p.cov))
        .collect()
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        SupervisorConfig {
            cov_on: 1.0,
            cov_off: COV_OFF_RATIO,
            min_fallback_steps: 250,
            eps: DEFAULT_COV_EPS,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(cov: f64, odd: usize) -> PredictionStats {
        PredictionStats {
            mean: 0.1,
            std: cov * 0.11,
            cov,
            odd_count: odd,
            per_tree: None,
        }
    }

    fn cfg(dwell: u64) -> SupervisorConfig {
        SupervisorConfig {
            cov_on: 0.5,
            cov_off: 0.3,
            min_fallback_steps: dwell,
            eps: 0.01,
        }
    }

    fn learned() -> ControlCommand {
        ControlCommand::new(0.2, 0.1, 0.0)
    }

    fn fallback() -> ControlCommand {
        ControlCommand::new(-0.1, 0.1, 0.0)
    }

    #[test]
    fn below_threshold_stays_learned() {
        let (cmd, src, _) = arbitrate(&stats(0.05, 0), learned(), fallback(), None, SupervisorState::default(), &cfg(1));
        assert_eq!((cmd, src), (learned(), ControlSource::Learned));
    }

    #[test]
    fn above_threshold_falls_back() {
        let (cmd, src, st) = arbitrate(&stats(0.8, 0), learned(), fallback(), None, SupervisorState::default(), &cfg(1));
        assert_eq!((cmd, src), (fallback(), ControlSource::FallbackPid));
        assert!(st.in_fallback);
    }

    #[test]
    fn hysteresis_sequence() {
        let mut sup = Supervisor::new(cfg(1)).unwrap();
        let sources: Vec<_> = [0.6, 0.4, 0.2]
            .iter()
            .map(|c| sup.step(&stats(*c, 0), learned(), fallback(), None).1)
            .collect();
        assert_eq!(
            sources,
            vec![ControlSource::FallbackPid, ControlSource::FallbackPid, ControlSource::Learned]
        );
    }

    #[test]
    fn dwell_holds_fallback() {
        let mut sup = Supervisor::new(cfg(3)).unwrap();
        let sources: Vec<_> = [0.9, 0.0, 0.0, 0.0, 0.0]
            .iter()
            .map(|c| sup.step(&stats(*c, 0), learned(), fallback(), None).1)
            .collect();
        use ControlSource::*;
        assert_eq!(sources, vec![FallbackPid, FallbackPid, FallbackPid, Learned, Learned]);
    }

    #[test]
    fn human_wins_immediately() {
        let human = ControlCommand::new(0.3, 0.0, 0.0);
        let (cmd, src, _) = arbitrate(&stats(0.0, 0), learned(), fallback(), Some(human), SupervisorState::default(), &cfg(1));
        assert_eq!((cmd, src), (human, ControlSource::HumanOverride));
    }

    #[test]
    fn run_stats_totals() {
        let mut sup = Supervisor::new(cfg(1)).unwrap();
        for (c, odd) in [(0.1, 1), (0.9, 3), (0.1, 0), (0.1, 2)] {
            sup.step(&stats(c, odd), learned(), fallback(), None);
        }
        let rs = sup.stats();
        assert_eq!(rs.total_odd_counts, 6);
        assert_eq!(rs.interventions, 1);
        assert_eq!(rs.steps, 4);
        assert_eq!(rs.max_cov, 0.9);
    }

    #[test]
    fn quantile_edges() {
        let v = [0.3, 0.1, 0.9, 0.5];
        assert_eq!(quantile(&v, 1.0), 0.9);
        assert_eq!(quantile(&v, 0.0), 0.1);
        assert!((quantile(&v, 0.5) - 0.4).abs() < 1e-12);
        let cal = calibrate_from_covs(&[0.25; 8], 0.999).unwrap();
        assert_eq!(cal.cov_on, 0.25);
        assert!((cal.cov_off - 0.15).abs() < 1e-15);
        assert!(calibrate_from_covs(&[0.0; 8], 0.999).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SupervisorConfig { cov_off: 0.6, ..cfg(1) }.validate().is_err());
        assert!(cfg(0).validate().is_err());
        assert!(cfg(1).validate().is_ok());
    }
}
