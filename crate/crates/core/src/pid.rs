//! The hand-tuned expert: a lateral PID on a composite offset/heading error
//! plus a longitudinal PID that holds the target speed.

use serde::{Deserialize, Serialize};

use crate::geometry::wrap_angle;
use crate::track::{TrackFrame, TrackGeometry};
use crate::vehicle::{ControlCommand, VehicleState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Anti-windup bound on the integral term's state.
    pub integral_limit: f64,
    pub output_limit: f64,
}

impl PidGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.kp.is_finite() && self.ki.is_finite() && self.kd.is_finite()) {
            return Err(Error::Config("PID gains must be finite".into()));
        }
        if !(self.integral_limit > 0.0 && self.output_limit > 0.0) {
            return Err(Error::Config("PID limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
    pub initialized: bool,
}

/// One PID update. The derivative term is zero on the first call.
pub fn pid_step(error: f64, gains: &PidGains, st: PidState, dt: f64) -> (f64, PidState) {
    let integral = (st.integral + error * dt).clamp(-gains.integral_limit, gains.integral_limit);
    let derivative = if st.initialized {
        (error - st.prev_error) / dt
    } else {
        0.0
    };
    let raw = gains.kp * error + gains.ki * integral + gains.kd * derivative;
    let output = raw.clamp(-gains.output_limit, gains.output_limit);
    (
        output,
        PidState {
            integral,
            prev_error: error,
            initialized: true,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub lateral: PidGains,
    pub speed: PidGains,
    /// Weight of the lookahead heading error in the lateral error (m/rad).
    pub k_psi: f64,
    /// Distance ahead along the centerline at which the reference heading is taken (m).
    pub lookahead_m: f64,
    /// Maps PID output (m of composite error) to normalized steering.
    pub steer_scale: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        // Frozen output of `latctl tune-pid` on preset "train-a" at 26.82 m/s.
        ExpertConfig {
            lateral: PidGains {
                kp: 1.5,
                ki: 0.05,
                kd: 0.1,
                integral_limit: 5.0,
                output_limit: 1.0,
            },
            speed: PidGains {
                kp: 0.5,
                ki: 0.05,
                kd: 0.0,
                integral_limit: 10.0,
                output_limit: 1.0,
            },
            k_psi: 1.5,
            lookahead_m: 8.0,
            steer_scale: 1.0,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        self.lateral.validate()?;
        self.speed.validate()?;
        if !(self.lookahead_m >= 0.0 && self.k_psi.is_finite() && self.steer_scale > 0.0) {
            return Err(Error::Config("invalid expert lookahead/k_psi/steer_scale".into()));
        }
        Ok(())
    }
}

/// Caller-owned controller memory.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExpertState {
    pub lateral: PidState,
    pub speed: PidState,
}

/// Composite lateral error: offset from `lane_offset` plus weighted heading
/// error against the centerline tangent `lookahead_m` ahead.
pub fn lateral_error(
    state: &VehicleState,
    frame: &TrackFrame,
    track: &TrackGeometry,
    cfg: &ExpertConfig,
    lane_offset: f64,
) -> f64 {
    let psi_ahead = track.heading_at(frame.s + cfg.lookahead_m);
    (frame.d - lane_offset) + cfg.k_psi * wrap_angle(state.heading - psi_ahead)
}

/// Expert command for the current state. Positive lateral error (car left of
/// its reference or pointing left of the road ahead) steers right.
#[allow(clippy::too_many_arguments)]
pub fn expert_command(
    state: &VehicleState,
    frame: &TrackFrame,
    track: &TrackGeometry,
    target_speed: f64,
    cfg: &ExpertConfig,
    st: &mut ExpertState,
    dt: f64,
    lane_offset: f64,
) -> ControlCommand {
    let e = lateral_error(state, frame, track, cfg, lane_offset);
    let (lat, lat_state) = pid_step(e, &cfg.lateral, st.lateral, dt);
    let (lon, lon_state) = pid_step(target_speed - state.speed, &cfg.speed, st.speed, dt);
    st.lateral = lat_state;
    st.speed = lon_state;
    ControlCommand {
        steer: -lat * cfg.steer_scale,
        accel: lon.max(0.0),
        brake: (-lon).max(0.0),
    }
    .clamped()
}
