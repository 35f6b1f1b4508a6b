//! Kinematic bicycle model integrated with explicit Euler steps.

use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, Vec2};
use crate::{Error, Result};

/// Physics time step of the simulator (500 Hz).
pub const DEFAULT_DT: f64 = 0.002;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Heading in (-pi, pi].
    pub heading: f64,
    /// Forward speed (m/s), never negative.
    pub speed: f64,
}

impl VehicleState {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite() && self.speed.is_finite()
    }
}

/// Normalized actuator command. Components are clamped before use.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlCommand {
    /// Steering in [-1, 1], positive turns left.
    pub steer: f64,
    pub accel: f64,
    pub brake: f64,
}

impl ControlCommand {
    pub fn new(steer: f64, accel: f64, brake: f64) -> Self {
        ControlCommand { steer, accel, brake }
    }

    pub fn clamped(self) -> Self {
        ControlCommand {
            steer: self.steer.clamp(-1.0, 1.0),
            accel: self.accel.clamp(0.0, 1.0),
            brake: self.brake.clamp(0.0, 1.0),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.steer.is_finite() && self.accel.is_finite() && self.brake.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub wheelbase: f64,
    /// Wheel angle at full steering command (rad).
    pub max_wheel_angle: f64,
    pub max_accel: f64,
    pub max_decel: f64,
    pub max_speed: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: DEFAULT_DT,
            wheelbase: 2.5,
            max_wheel_angle: 0.35,
            max_accel: 4.0,
            max_decel: 8.0,
            max_speed: 60.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.wheelbase > 0.0) {
            return Err(Error::Config("wheelbase must be positive".into()));
        }
        if !(self.max_wheel_angle > 0.0 && self.max_wheel_angle < std::f64::consts::FRAC_PI_2) {
            return Err(Error::Config("max_wheel_angle must be in (0, pi/2)".into()));
        }
        if !(self.max_accel >= 0.0 && self.max_decel >= 0.0 && self.max_speed > 0.0) {
            return Err(Error::Config("acceleration limits and max_speed must be non-negative".into()));
        }
        Ok(())
    }
}

/// Advances the state by one explicit Euler step. Position and heading use
/// the pre-update heading and speed.
pub fn step(state: &VehicleState, cmd: &ControlCommand, cfg: &SimConfig) -> VehicleState {
    let cmd = cmd.clamped();
    let wheel_angle = cmd.steer * cfg.max_wheel_angle;
    let heading_rate = state.speed * wheel_angle.tan() / cfg.wheelbase;
    let speed_rate = cmd.accel * cfg.max_accel - cmd.brake * cfg.max_decel;
    let (sin_h, cos_h) = state.heading.sin_cos();
    VehicleState {
        x: state.x + state.speed * cos_h * cfg.dt,
        y: state.y + state.speed * sin_h * cfg.dt,
        heading: wrap_angle(state.heading + heading_rate * cfg.dt),
        speed: (state.speed + speed_rate * cfg.dt).clamp(0.0, cfg.max_speed),
    }
}
