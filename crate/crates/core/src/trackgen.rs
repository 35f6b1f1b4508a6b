//! Procedural closed-track generation.
//!
//! Tracks are star-shaped radial curves `r(θ) = 1 + Σ a_k cos(k θ + φ_k)`
//! with seeded random harmonics, rescaled to a target length and resampled
//! at uniform arc-length spacing. A candidate is rejected (and the next one
//! drawn from the same seeded stream) when its tightest turn is below the
//! configured radius or two distant parts of the corridor come too close.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, Vec2};
use crate::track::TrackGeometry;
use crate::{Error, Result};

const PRESETS_TOML: &str = include_str!("../presets/tracks.toml");

/// Dense samples per candidate curve before resampling.
const DENSE_SAMPLES: usize = 24_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub name: String,
    pub seed: u64,
    pub target_length_m: f64,
    pub width_m: f64,
    /// Number of random harmonics. Zero yields a circle.
    pub corner_count: usize,
    /// Highest harmonic order a corner may use.
    #[serde(default = "default_max_order")]
    pub max_order: usize,
    /// Scale of harmonic amplitudes (relative radius deviation).
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Centerline waypoint spacing (m), at most 2.
    #[serde(default = "default_spacing")]
    pub spacing_m: f64,
    /// Tightest allowed turn radius of the centerline (m).
    #[serde(default = "default_min_radius")]
    pub min_radius_m: f64,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
}

fn default_max_order() -> usize {
    12
}
fn default_amplitude() -> f64 {
    0.12
}
fn default_spacing() -> f64 {
    2.0
}
fn default_min_radius() -> f64 {
    30.0
}
fn default_attempts() -> usize {
    200
}

impl TrackSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_length_m > 0.0) {
            return Err(Error::Config("target length must be positive".into()));
        }
        if !(self.width_m > 0.0) {
            return Err(Error::Config("track width must be positive".into()));
        }
        if !(self.spacing_m > 0.0 && self.spacing_m <= 2.0) {
            return Err(Error::Config("waypoint spacing must be in (0, 2] m".into()));
        }
        if self.max_order < 2 && self.corner_count > 0 {
            return Err(Error::Config("max_order must be at least 2".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct PresetFile {
    preset: Vec<TrackSpec>,
}

/// Generator parameters for the bundled presets.
pub fn preset_specs() -> Vec<TrackSpec> {
    let file: PresetFile = toml::from_str(PRESETS_TOML).expect("bundled presets parse");
    file.preset
}

pub fn preset_spec(name: &str) -> Result<TrackSpec> {
    preset_specs()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| {
            let names: Vec<String> = preset_specs().into_iter().map(|p| p.name).collect();
            Error::Config(format!("unknown track preset {name:?} (known: {})", names.join(", ")))
        })
}

pub fn preset(name: &str) -> Result<TrackGeometry> {
    generate_track(&preset_spec(name)?)
}

/// Resolves a preset name or a track JSON path.
pub fn resolve_track(name_or_path: &str) -> Result<TrackGeometry> {
    if preset_specs().iter().any(|p| p.name == name_or_path) {
        preset(name_or_path)
    } else {
        crate::track::load_track(name_or_path)
    }
}

pub fn generate_track(spec: &TrackSpec) -> Result<TrackGeometry> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut last_reason = String::new();
    for _ in 0..spec.max_attempts {
        let harmonics: Vec<(f64, f64, f64)> = (0..spec.corner_count)
            .map(|_| {
                let order = rng.gen_range(2..=spec.max_order) as f64;
                let amp = spec.amplitude * rng.gen_range(0.3..1.0) / order.sqrt();
                let phase = rng.gen_range(0.0..2.0 * PI);
                (order, amp, phase)
            })
            .collect();
        match build_candidate(spec, &harmonics) {
            Ok(track) => return Ok(track),
            Err(reason) => last_reason = reason,
        }
    }
    Err(Error::TrackGeneration {
        seed: spec.seed,
        attempts: spec.max_attempts,
        reason: last_reason,
    })
}

fn build_candidate(spec: &TrackSpec, harmonics: &[(f64, f64, f64)]) -> std::result::Result<TrackGeometry, String> {
    let mut dense = Vec::with_capacity(DENSE_SAMPLES);
    for i in 0..DENSE_SAMPLES {
        let theta = 2.0 * PI * i as f64 / DENSE_SAMPLES as f64;
        let r = 1.0
            + harmonics
                .iter()
                .map(|&(k, a, phi)| a * (k * theta + phi).cos())
                .sum::<f64>();
        if r <= 0.2 {
            return Err("radial function too close to the origin".into());
        }
        dense.push(Vec2::from_angle(theta) * r);
    }
    let dense_len: f64 = (0..DENSE_SAMPLES)
        .map(|i| dense[i].distance(dense[(i + 1) % DENSE_SAMPLES]))
        .sum();
    let scale = spec.target_length_m / dense_len;
    for p in &mut dense {
        *p = *p * scale;
    }

    let waypoints = resample(&dense, spec.spacing_m);
    let half_width = spec.width_m / 2.0;
    let min_radius = min_turn_radius(&waypoints, 10.0);
    if min_radius < spec.min_radius_m {
        return Err(format!(
            "tightest turn radius {min_radius:.1} m below {} m",
            spec.min_radius_m
        ));
    }
    if !corridor_clear(&waypoints, spec.width_m * 1.5) {
        return Err("corridor passes too close to itself".into());
    }
    TrackGeometry::new(spec.name.clone(), waypoints, half_width).map_err(|e| e.to_string())
}

/// Uniform arc-length resampling of a closed polyline.
fn resample(dense: &[Vec2], max_spacing: f64) -> Vec<Vec2> {
    let n = dense.len();
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0.0);
    for i in 0..n {
        let next = cum[i] + dense[i].distance(dense[(i + 1) % n]);
        cum.push(next);
    }
    let total = cum[n];
    let count = (total / max_spacing).ceil() as usize;
    let step = total / count as f64;
    let mut out = Vec::with_capacity(count);
    let mut j = 0;
    for k in 0..count {
        let s = k as f64 * step;
        while cum[j + 1] < s {
            j += 1;
        }
        let seg = cum[j + 1] - cum[j];
        let u = if seg > 0.0 { (s - cum[j]) / seg } else { 0.0 };
        let a = dense[j];
        let b = dense[(j + 1) % n];
        out.push(a + (b - a) * u);
    }
    out
}

/// Smallest radius of curvature, measured over chords of roughly `window` meters.
pub fn min_turn_radius(pts: &[Vec2], window: f64) -> f64 {
    curvature_profile(pts, window)
        .into_iter()
        .map(|k| 1.0 / k.abs())
        .fold(f64::INFINITY, f64::min)
}

/// Signed curvature at each waypoint from the heading change across a window.
pub fn curvature_profile(pts: &[Vec2], window: f64) -> Vec<f64> {
    let n = pts.len();
    let spacing = (0..n).map(|i| pts[i].distance(pts[(i + 1) % n])).sum::<f64>() / n as f64;
    let half = ((window / spacing / 2.0).round() as usize).max(1);
    (0..n)
        .map(|i| {
            let a = pts[(i + n - half) % n];
            let b = pts[i];
            let c = pts[(i + half) % n];
            let turn = wrap_angle((c - b).angle() - (b - a).angle());
            let arc = a.distance(b) + b.distance(c);
            turn / (0.5 * arc)
        })
        .collect()
}

/// True when no two points further apart along the track than `3 * clearance`
/// come within `clearance` of each other.
fn corridor_clear(pts: &[Vec2], clearance: f64) -> bool {
    let n = pts.len();
    let spacing = (0..n).map(|i| pts[i].distance(pts[(i + 1) % n])).sum::<f64>() / n as f64;
    let min_index_gap = ((3.0 * clearance) / spacing).ceil() as usize;
    let cell = clearance;
    let mut buckets: std::collections::HashMap<(i64, i64), Vec<usize>> = Default::default();
    for (i, p) in pts.iter().enumerate() {
        let key = ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
        buckets.entry(key).or_default().push(i);
    }
    for (i, p) in pts.iter().enumerate() {
        let (cx, cy) = ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = buckets.get(&(cx + dx, cy + dy)) {
                    for &j in bucket {
                        let gap = i.abs_diff(j).min(n - i.abs_diff(j));
                        if gap > min_index_gap && p.distance(pts[j]) < clearance {
                            return false;
                        }
                    }
                }
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64, corners: usize) -> TrackSpec {
        TrackSpec {
            name: "t".into(),
            seed,
            target_length_m: 2000.0,
            width_m: 15.0,
            corner_count: corners,
            max_order: 8,
            amplitude: 0.12,
            spacing_m: 2.0,
            min_radius_m: 25.0,
            max_attempts: 200,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_track(&small_spec(3, 4)).unwrap();
        let b = generate_track(&small_spec(3, 4)).unwrap();
        assert_eq!(a.waypoints(), b.waypoints());
        let c = generate_track(&small_spec(4, 4)).unwrap();
        assert_ne!(a.waypoints(), c.waypoints());
    }

    #[test]
    fn zero_corners_is_circle_like() {
        let t = generate_track(&small_spec(1, 0)).unwrap();
        let k = curvature_profile(t.waypoints(), 10.0);
        assert!(k.iter().all(|&v| v > 0.0));
        assert!((t.total_length() - 2000.0).abs() < 1.0);
    }

    #[test]
    fn spacing_is_at_most_two_meters() {
        let t = generate_track(&small_spec(5, 5)).unwrap();
        let pts = t.waypoints();
        for i in 0..pts.len() {
            assert!(pts[i].distance(pts[(i + 1) % pts.len()]) <= 2.0 + 1e-9);
        }
    }

    #[test]
    fn impossible_spec_names_seed() {
        let mut spec = small_spec(77, 6);
        spec.min_radius_m = 5000.0;
        spec.max_attempts = 3;
        let err = generate_track(&spec).unwrap_err();
        assert!(err.to_string().contains("seed 77"), "{err}");
    }

    #[test]
    fn presets_exist() {
        let names: Vec<String> = preset_specs().into_iter().map(|p| p.name).collect();
        assert!(names.contains(&"train-a".to_string()));
        assert!(names.contains(&"eval-b".to_string()));
    }
}
