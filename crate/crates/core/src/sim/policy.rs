use serde::{Deserialize, Serialize};

use super::geometry::wrap_angle;
use super::run::Observation;
use super::{Action, VehicleParams, MAX_STEER};

/// Tuning of the builtin driver.
///
/// Longitudinal control follows the intelligent driver model, overridden by
/// a brake command proportional to how far time-to-collision has dropped
/// below `ttc_threshold_s`. Command changes between decisions are rate
/// limited except under emergency braking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyParams {
    pub comfort_accel: f64,
    pub comfort_decel: f64,
    pub min_gap_m: f64,
    pub time_headway_s: f64,
    pub ttc_threshold_s: f64,
    /// Decelerations above this skip the rate limit.
    pub emergency_decel: f64,
    /// Longitudinal command rate limit, m/s³.
    pub jerk_limit: f64,
    /// Steering rate limit, rad/s.
    pub steer_rate: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            comfort_accel: 1.5,
            comfort_decel: 2.5,
            min_gap_m: 3.0,
            time_headway_s: 1.2,
            ttc_threshold_s: 2.0,
            emergency_decel: 4.0,
            jerk_limit: 3.5,
            steer_rate: 0.6,
        }
    }
}

/// Stateless pure-pursuit and car-following driver.
pub fn builtin_policy(obs: &Observation, p: &PolicyParams, vehicle: &VehicleParams) -> Action {
    let ego = &obs.ego;

    let (dx, dy) = (obs.lookahead[0] - ego.x, obs.lookahead[1] - ego.y);
    let alpha = wrap_angle(dy.atan2(dx) - ego.heading);
    let ld = dx.hypot(dy).max(1e-3);
    let pursuit = (2.0 * vehicle.wheelbase * alpha.sin() / ld).atan();
    let max_dsteer = p.steer_rate * obs.dt;
    let steer = pursuit
        .clamp(ego.steer - max_dsteer, ego.steer + max_dsteer)
        .clamp(-MAX_STEER, MAX_STEER);

    let v0 = obs.target_speed_mps.max(0.1);
    let mut accel = p.comfort_accel * (1.0 - (ego.v / v0).powi(4));
    let mut ttc_brake: f64 = 0.0;
    if let Some(o) = &obs.obstacle {
        let gap = o.gap_m.max(0.1);
        let closing = ego.v - o.speed_mps;
        let desired = p.min_gap_m
            + (ego.v * p.time_headway_s
                + ego.v * closing / (2.0 * (p.comfort_accel * p.comfort_decel).sqrt()))
            .max(0.0);
        accel -= p.comfort_accel * (desired / gap).powi(2);
        if closing > 0.0 {
            let ttc = o.gap_m.max(0.0) / closing;
            if ttc < p.ttc_threshold_s {
                ttc_brake = 1.0 - ttc / p.ttc_threshold_s;
            }
        }
    }
    let accel = accel.max(-vehicle.max_brake);
    let current = vehicle.max_accel * ego.throttle - vehicle.max_brake * ego.brake;
    let wanted = accel + vehicle.drag * ego.v;
    let emergency = accel <= -p.emergency_decel || ttc_brake > 0.5;
    let step = p.jerk_limit * obs.dt;
    let command = if emergency {
        wanted
    } else {
        wanted.clamp(current - step, current + step)
    };

    let (mut throttle, mut brake) = if command >= 0.0 {
        (command / vehicle.max_accel, 0.0)
    } else {
        (0.0, -command / vehicle.max_brake)
    };
    if ttc_brake > brake {
        brake = ttc_brake;
        throttle = 0.0;
    }
    Action::new(steer, throttle, brake).clamped()
}
