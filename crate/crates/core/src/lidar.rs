//! Simulated range-finder suite: the controller's observation vector.

use std::f64::consts::FRAC_PI_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;
use crate::track::TrackGeometry;
use crate::vehicle::VehicleState;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    /// Odd, so that one beam points straight ahead.
    pub beam_count: usize,
    /// Field of view is `[-fov_half_angle, +fov_half_angle]` around the heading.
    pub fov_half_angle: f64,
    pub max_range: f64,
    /// Standard deviation of additive Gaussian range noise (m). Zero disables noise.
    pub noise_std: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        LidarConfig {
            beam_count: 19,
            fov_half_angle: FRAC_PI_2,
            max_range: 200.0,
            noise_std: 0.0,
        }
    }
}

impl LidarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_count < 3 || self.beam_count % 2 == 0 {
            return Err(Error::Config(format!(
                "beam_count must be odd and at least 3, got {}",
                self.beam_count
            )));
        }
        if !(self.fov_half_angle > 0.0 && self.fov_half_angle <= std::f64::consts::PI) {
            return Err(Error::Config("fov_half_angle must be in (0, pi]".into()));
        }
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(Error::Config("max_range must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }

    /// Beam angles relative to the heading, strictly increasing (right to left).
    pub fn angles(&self) -> Vec<f64> {
        let n = self.beam_count;
        (0..n)
            .map(|i| -self.fov_half_angle + 2.0 * self.fov_half_angle * i as f64 / (n - 1) as f64)
            .collect()
    }
}

/// Beam distances in meters, ordered like [`LidarConfig::angles`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LidarScan {
    pub distances: Vec<f64>,
}

impl LidarScan {
    pub fn new(distances: Vec<f64>) -> Self {
        LidarScan { distances }
    }

    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.distances
    }

    /// Checks the scan invariants against a sensor configuration.
    pub fn validate(&self, beam_count: usize, max_range: f64) -> Result<()> {
        if self.distances.len() != beam_count {
            return Err(Error::BeamCount {
                expected: beam_count,
                actual: self.distances.len(),
            });
        }
        if let Some(v) = self
            .distances
            .iter()
            .find(|v| !(v.is_finite() && **v > 0.0 && **v <= max_range))
        {
            return Err(Error::Dataset(format!(
                "scan distance {v} outside (0, {max_range}]"
            )));
        }
        Ok(())
    }
}

/// Precomputed beam geometry for repeated scans.
#[derive(Debug, Clone)]
pub struct Lidar {
    cfg: LidarConfig,
    angles: Vec<f64>,
}

impl Lidar {
    pub fn new(cfg: LidarConfig) -> Result<Self> {
        cfg.validate()?;
        let angles = cfg.angles();
        Ok(Lidar { cfg, angles })
    }

    pub fn config(&self) -> &LidarConfig {
        &self.cfg
    }

    /// Noise-free scan; fails when the vehicle is off the corridor.
    pub fn scan(&self, state: &VehicleState, track: &TrackGeometry) -> Result<LidarScan> {
        let frame = track.project(state.position());
        if frame.d.abs() >= track.half_width() {
            return Err(Error::OffTrack {
                offset: frame.d.abs(),
                half_width: track.half_width(),
            });
        }
        Ok(self.scan_on_track(state, track))
    }

    /// Scan without the corridor check.
    pub(crate) fn scan_on_track(&self, state: &VehicleState, track: &TrackGeometry) -> LidarScan {
        let origin = state.position();
        let distances = self
            .angles
            .iter()
            .map(|a| track.cast_ray(origin, Vec2::from_angle(state.heading + a), self.cfg.max_range))
            .collect();
        LidarScan { distances }
    }

    /// Scan with additive Gaussian noise from `noise_std`, clamped to
    /// `(0, max_range]`. Identical to [`Lidar::scan`] when noise is off.
    pub fn scan_noisy(
        &self,
        state: &VehicleState,
        track: &TrackGeometry,
        rng: &mut ChaCha8Rng,
    ) -> Result<LidarScan> {
        let mut scan = self.scan(state, track)?;
        if self.cfg.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.cfg.noise_std).expect("valid std");
            let floor = self.cfg.max_range * 1e-6;
            for v in &mut scan.distances {
                *v = (*v + normal.sample(rng)).clamp(floor, self.cfg.max_range);
            }
        }
        Ok(scan)
    }
}

/// One-shot scan with a fresh sensor.
pub fn scan(state: &VehicleState, track: &TrackGeometry, cfg: &LidarConfig) -> Result<LidarScan> {
    Lidar::new(cfg.clone())?.scan(state, track)
}

/// Seeded noise stream for [`Lidar::scan_noisy`].
pub fn noise_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::rectangle_track;
    use proptest::prelude::*;

    fn straight() -> TrackGeometry {
        rectangle_track("long", 2000.0, 300.0, 200, 7.5).unwrap()
    }

    #[test]
    fn side_beams_and_forward_clamp() {
        let track = straight();
        let state = VehicleState { x: 600.0, y: 0.0, heading: 0.0, speed: 20.0 };
        let s = scan(&state, &track, &LidarConfig::default()).unwrap();
        assert_eq!(s.len(), 19);
        assert!((s.distances[18] - 7.5).abs() < 1e-12);
        assert!((s.distances[0] - 7.5).abs() < 1e-12);
        assert_eq!(s.distances[9], 200.0);
    }

    #[test]
    fn centered_scan_is_palindromic() {
        let track = straight();
        let state = VehicleState { x: 900.0, y: 0.0, heading: 0.0, speed: 20.0 };
        let s = scan(&state, &track, &LidarConfig::default()).unwrap();
        for i in 0..19 {
            assert!((s.distances[i] - s.distances[18 - i]).abs() < 1e-9);
        }
    }

    #[test]
    fn off_track_is_error() {
        let track = straight();
        let state = VehicleState { x: 600.0, y: 9.0, heading: 0.0, speed: 20.0 };
        assert!(matches!(
            scan(&state, &track, &LidarConfig::default()),
            Err(Error::OffTrack { .. })
        ));
    }

    #[test]
    fn even_beam_count_rejected() {
        let cfg = LidarConfig { beam_count: 18, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn noise_off_matches_clean_scan() {
        let track = straight();
        let lidar = Lidar::new(LidarConfig::default()).unwrap();
        let state = VehicleState { x: 600.0, y: 1.0, heading: 0.1, speed: 20.0 };
        let mut rng = noise_rng(3);
        assert_eq!(
            lidar.scan_noisy(&state, &track, &mut rng).unwrap(),
            lidar.scan(&state, &track).unwrap()
        );
    }

    proptest! {
        #[test]
        fn translation_invariance(dx in -500.0f64..500.0, dy in -500.0f64..500.0, d in -6.0f64..6.0, h in -0.5f64..0.5) {
            let base = straight();
            let shifted_pts: Vec<Vec2> = base.waypoints().iter().map(|p| *p + Vec2::new(dx, dy)).collect();
            let shifted = TrackGeometry::new("shifted", shifted_pts, 7.5).unwrap();
            let state = VehicleState { x: 800.0, y: d, heading: h, speed: 10.0 };
            let moved = VehicleState { x: 800.0 + dx, y: d + dy, ..state };
            let cfg = LidarConfig::default();
            let a = scan(&state, &base, &cfg).unwrap();
            let b = scan(&moved, &shifted, &cfg).unwrap();
            for (u, v) in a.distances.iter().zip(&b.distances) {
                prop_assert!((u - v).abs() < 1e-6);
            }
        }

        #[test]
        fn distances_in_range(x in 10.0f64..1990.0, d in -7.0f64..7.0, h in -3.1f64..3.1) {
            let track = straight();
            let state = VehicleState { x, y: d, heading: h, speed: 10.0 };
            let s = scan(&state, &track, &LidarConfig::default()).unwrap();
            for v in s.distances {
                prop_assert!(v > 0.0 && v <= 200.0);
            }
        }
    }
}
