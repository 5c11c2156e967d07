//! Deterministic 2D closed-loop simulator with a real-time synchronous
//! scheduler.
//!
//! The ego vehicle follows a kinematic bicycle model; traffic agents replay
//! scripted piecewise-linear trajectories. At every decision frame the
//! policy is queried, the frame's inference latency `t_i` is converted into
//! `n = frames_to_skip(t_i, dt)` and the returned action is held for `n + 1`
//! world frames.

mod geometry;
mod log;
mod policy;
mod run;
mod scenario;
mod suite;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use geometry::{wrap_angle, Obb, Polyline, Projection};
pub use log::{
    derive_dynamics, detect_blocked, BlockedInterval, Decision, Dynamics, EndReason, FrameRecord,
    Infraction, InfractionKind, NeighborSample, TrajectoryLog, BLOCKED_DURATION_S,
    BLOCKED_SPEED_MPS,
};
pub use policy::{builtin_policy, PolicyParams};
pub use run::{run_route, LatencySource, Observation, ObstacleObservation, RtsConfig};
pub use scenario::{
    AgentKind, AgentWaypoint, Scenario, ScenarioKind, ScriptedAgent, Trigger, TriggerKind,
};
pub use suite::{generate_suite, SuiteParams, SUITE_SIZE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario `{id}`: {reason}")]
    InvalidScenario { id: String, reason: String },
    #[error("latency trace exhausted at frame {frame} (trace has {len} frames)")]
    TraceExhausted { frame: usize, len: usize },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
    pub steer: f64,
    pub throttle: f64,
    pub brake: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub steer: f64,
    pub throttle: f64,
    pub brake: f64,
}

pub const MAX_STEER: f64 = 0.5;

impl Action {
    pub fn new(steer: f64, throttle: f64, brake: f64) -> Self {
        Self {
            steer,
            throttle,
            brake,
        }
    }

    /// Clamps every field into range; NaN becomes zero.
    pub fn clamped(self) -> Self {
        let fix = |v: f64, lo: f64, hi: f64| if v.is_nan() { 0.0 } else { v.clamp(lo, hi) };
        Self {
            steer: fix(self.steer, -MAX_STEER, MAX_STEER),
            throttle: fix(self.throttle, 0.0, 1.0),
            brake: fix(self.brake, 0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub max_accel: f64,
    pub max_brake: f64,
    pub wheelbase: f64,
    pub max_speed: f64,
    pub drag: f64,
    pub length: f64,
    pub width: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            max_accel: 3.0,
            max_brake: 8.0,
            wheelbase: 2.8,
            max_speed: 20.0,
            drag: 0.05,
            length: 4.6,
            width: 1.9,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("max_accel", self.max_accel),
            ("max_brake", self.max_brake),
            ("wheelbase", self.wheelbase),
            ("max_speed", self.max_speed),
            ("length", self.length),
            ("width", self.width),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::InvalidConfig(format!(
                    "vehicle `{name}` must be positive, got {v}"
                )));
            }
        }
        if !(self.drag.is_finite() && self.drag >= 0.0) {
            return Err(SimError::InvalidConfig(format!(
                "vehicle `drag` must be non-negative, got {}",
                self.drag
            )));
        }
        Ok(())
    }

    pub fn footprint(&self, s: &EgoState) -> Obb {
        Obb {
            center: [s.x, s.y],
            heading: s.heading,
            length: self.length,
            width: self.width,
        }
    }
}

/// Quotients this close to an integer, relative to their size, are taken as
/// that integer before truncation.
pub const SKIP_SNAP_REL_TOL: f64 = 1e-9;

/// Control updates skipped after a decision with inference time `t_i`:
/// `max(0, trunc(t_i / dt) - 1)`. Exact multiples of `dt` count in full
/// even when the binary quotient lands just below the integer.
pub fn frames_to_skip(t_i: f64, dt: f64) -> usize {
    let q = t_i / dt;
    let nearest = q.round();
    let ratio = if (q - nearest).abs() <= SKIP_SNAP_REL_TOL * nearest.abs().max(1.0) {
        nearest
    } else {
        q.trunc()
    };
    if ratio.is_nan() || ratio < 1.0 {
        0
    } else {
        ratio as usize - 1
    }
}

/// One explicit-Euler step of the kinematic bicycle model. Brake overrides
/// throttle.
pub fn step_ego(s: &EgoState, a: &Action, dt: f64, p: &VehicleParams) -> EgoState {
    let a = a.clamped();
    let throttle = if a.brake > 0.0 { 0.0 } else { a.throttle };
    let accel = p.max_accel * throttle - p.max_brake * a.brake - p.drag * s.v;
    EgoState {
        x: s.x + s.v * s.heading.cos() * dt,
        y: s.y + s.v * s.heading.sin() * dt,
        heading: wrap_angle(s.heading + s.v / p.wheelbase * a.steer.tan() * dt),
        v: (s.v + accel * dt).clamp(0.0, p.max_speed),
        steer: a.steer,
        throttle,
        brake: a.brake,
    }
}
