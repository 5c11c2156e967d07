use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::Polyline;
use super::scenario::{
    AgentKind, AgentWaypoint, Scenario, ScenarioKind, ScriptedAgent, Trigger, TriggerKind,
};

pub const SUITE_SIZE: usize = 20;
const LANE_WIDTH: f64 = 3.5;
const CAR_LENGTH: f64 = 4.6;
const CAR_WIDTH: f64 = 1.9;
/// Ego length used when placing agents relative to the ego.
const EGO_LENGTH: f64 = 4.6;
const WAYPOINT_SPACING: f64 = 2.0;
const SEGMENTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteParams {
    pub count: usize,
    pub route_length_m: f64,
}

impl Default for SuiteParams {
    fn default() -> Self {
        Self {
            count: SUITE_SIZE,
            route_length_m: 150.0,
        }
    }
}

const KINDS: [ScenarioKind; 5] = [
    ScenarioKind::Straight,
    ScenarioKind::CutIn,
    ScenarioKind::StoppedObstacle,
    ScenarioKind::Merge,
    ScenarioKind::Fog,
];

/// Straight road, optionally with one circular bend of `bend_rad` starting
/// at `bend_at` with radius `radius`.
fn road(length: f64, bend: Option<(f64, f64, f64)>) -> Vec<[f64; 2]> {
    let n = (length / WAYPOINT_SPACING).round() as usize;
    let mut pts = Vec::with_capacity(n + 1);
    let (mut x, mut y, mut h) = (0.0_f64, 0.0_f64, 0.0_f64);
    pts.push([x, y]);
    for i in 0..n {
        let s = i as f64 * WAYPOINT_SPACING;
        if let Some((at, radius, angle)) = bend {
            let arc = radius * angle.abs();
            if s >= at && s < at + arc {
                h += angle.signum() * WAYPOINT_SPACING / radius;
            }
        }
        x += WAYPOINT_SPACING * h.cos();
        y += WAYPOINT_SPACING * h.sin();
        pts.push([x, y]);
    }
    pts
}

fn segments(n_points: usize) -> Vec<(usize, usize)> {
    let last = n_points - 1;
    (0..SEGMENTS)
        .map(|i| (i * last / SEGMENTS, (i + 1) * last / SEGMENTS))
        .collect()
}

/// Samples `(t, s(t), d(t))` every 0.5 s into route-relative waypoints.
fn follow(
    line: &Polyline,
    horizon: f64,
    mut at: impl FnMut(f64) -> (f64, f64),
) -> Vec<AgentWaypoint> {
    let steps = (horizon / 0.5).ceil() as usize;
    (0..=steps)
        .map(|i| {
            let t = i as f64 * 0.5;
            let (s, d) = at(t);
            let p = line.offset_point(s, d);
            AgentWaypoint {
                t,
                x: p[0],
                y: p[1],
            }
        })
        .collect()
}

fn car(id: &str, heading: f64, trajectory: Vec<AgentWaypoint>) -> ScriptedAgent {
    ScriptedAgent {
        id: id.into(),
        kind: AgentKind::Vehicle,
        length: CAR_LENGTH,
        width: CAR_WIDTH,
        heading,
        trajectory,
    }
}

/// Arc length travelled by a car that waits until `t_go` and then
/// accelerates at `accel` up to `v_max`.
fn pull_away(t: f64, t_go: f64, accel: f64, v_max: f64) -> f64 {
    let tau = (t - t_go).max(0.0);
    let t_ramp = v_max / accel;
    if tau <= t_ramp {
        0.5 * accel * tau * tau
    } else {
        0.5 * accel * t_ramp * t_ramp + v_max * (tau - t_ramp)
    }
}

/// Smooth lateral transition from `from` to `to` over `[t0, t0 + dur]`.
fn lane_change(t: f64, t0: f64, dur: f64, from: f64, to: f64) -> f64 {
    let u = ((t - t0) / dur).clamp(0.0, 1.0);
    from + (to - from) * (3.0 * u * u - 2.0 * u * u * u)
}

/// Speed profile of a car cruising at `v` that brakes at `decel` from
/// `t_brake` to `v_low`, waits `wait` seconds and then accelerates back.
fn brake_profile(
    t: f64,
    v: f64,
    t_brake: f64,
    decel: f64,
    v_low: f64,
    wait: f64,
    accel: f64,
) -> f64 {
    if t <= t_brake {
        return v * t;
    }
    let s0 = v * t_brake;
    let t_dec = (v - v_low) / decel;
    let tau = t - t_brake;
    if tau <= t_dec {
        return s0 + v * tau - 0.5 * decel * tau * tau;
    }
    let s1 = s0 + v * t_dec - 0.5 * decel * t_dec * t_dec;
    let tau = tau - t_dec;
    if tau <= wait {
        return s1 + v_low * tau;
    }
    let s2 = s1 + v_low * wait;
    let tau = tau - wait;
    let t_acc = (v - v_low) / accel;
    if tau <= t_acc {
        s2 + v_low * tau + 0.5 * accel * tau * tau
    } else {
        s2 + v_low * t_acc + 0.5 * accel * t_acc * t_acc + v * (tau - t_acc)
    }
}

fn adjacent_traffic(
    rng: &mut ChaCha8Rng,
    line: &Polyline,
    v: f64,
    horizon: f64,
    agents: &mut Vec<ScriptedAgent>,
) {
    for j in 0..2 {
        let speed = v + rng.gen_range(-1.5..1.5);
        let s0 = rng.gen_range(-10.0..25.0) + 30.0 * j as f64;
        let traj = follow(line, horizon, |t| (s0 + speed * t, LANE_WIDTH));
        agents.push(car(&format!("traffic{j}"), 0.0, traj));
    }
}

fn scenario(index: usize, kind: ScenarioKind, rng: &mut ChaCha8Rng, length: f64) -> Scenario {
    let name = match kind {
        ScenarioKind::Straight => "straight",
        ScenarioKind::CutIn => "cut_in",
        ScenarioKind::StoppedObstacle => "stopped_obstacle",
        ScenarioKind::Merge => "merge",
        ScenarioKind::Fog => "fog",
    };
    let id = format!("s{index:02}_{name}");
    let bend = match kind {
        ScenarioKind::Merge => {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Some((
                rng.gen_range(30.0..50.0),
                rng.gen_range(45.0..70.0),
                sign * rng.gen_range(0.4..0.6),
            ))
        }
        ScenarioKind::Straight if index % 2 == 1 => Some((
            rng.gen_range(40.0..60.0),
            rng.gen_range(60.0..90.0),
            rng.gen_range(-0.4..0.4),
        )),
        _ => None,
    };
    let route = road(length, bend);
    let line = Polyline::new(route.clone());
    let mut v = rng.gen_range(9.0..12.0);
    let mut visibility = None;
    let mut agents = Vec::new();
    let mut triggers = Vec::new();
    let horizon = 2.0 * length / 8.0 + 40.0;
    adjacent_traffic(rng, &line, v, horizon, &mut agents);
    let ego_front = |t: f64, v: f64| v * t + EGO_LENGTH / 2.0;

    match kind {
        ScenarioKind::Straight => {}
        ScenarioKind::CutIn => {
            let t_c = rng.gen_range(3.0..5.0);
            let gap = rng.gen_range(7.0..11.0);
            let v_c = v - rng.gen_range(1.0..3.0);
            let decel = rng.gen_range(3.5..5.0);
            let s_c = ego_front(t_c, v) + gap + CAR_LENGTH / 2.0 - v_c * t_c;
            let traj = follow(&line, horizon, |t| {
                let s = s_c + brake_profile(t, v_c, t_c + 1.5, decel, 0.0, 2.0, 2.0);
                (s, lane_change(t, t_c, 1.5, LANE_WIDTH, 0.0))
            });
            agents.push(car("cutter", 0.0, traj));
            triggers.push(Trigger {
                kind: TriggerKind::CutIn,
                agent: "cutter".into(),
                at_s: t_c,
            });
        }
        ScenarioKind::StoppedObstacle => {
            let t_a = rng.gen_range(2.0..4.0);
            let gap = rng.gen_range(13.0..18.0);
            let s_o = ego_front(t_a, v) + gap + CAR_LENGTH / 2.0;
            let t_go = t_a + rng.gen_range(6.0..9.0);
            let traj = follow(&line, horizon, |t| (s_o + pull_away(t, t_go, 2.0, v), 0.0));
            agents.push(car("stalled", 0.0, traj));
            triggers.push(Trigger {
                kind: TriggerKind::Appear,
                agent: "stalled".into(),
                at_s: t_a,
            });
            triggers.push(Trigger {
                kind: TriggerKind::StoppedObstacle,
                agent: "stalled".into(),
                at_s: t_a,
            });
        }
        ScenarioKind::Merge => {
            let t_m = rng.gen_range(3.0..5.0);
            let gap = rng.gen_range(8.0..12.0);
            let v_m = v - rng.gen_range(2.0..4.0);
            let s_m = ego_front(t_m, v) + gap + CAR_LENGTH / 2.0 - v_m * t_m;
            let decel = rng.gen_range(2.5..4.0);
            let traj = follow(&line, horizon, |t| {
                let s = s_m + brake_profile(t, v_m, t_m + 2.0, decel, 1.0, 1.0, 2.0);
                (s, lane_change(t, t_m, 2.0, -LANE_WIDTH, 0.0))
            });
            agents.push(car("merger", 0.0, traj));
            triggers.push(Trigger {
                kind: TriggerKind::Merge,
                agent: "merger".into(),
                at_s: t_m,
            });
        }
        ScenarioKind::Fog => {
            v = rng.gen_range(7.0..9.0);
            // Barely enough sight distance for a prompt emergency stop.
            let a = 8.0 + 0.05 * v;
            let stop = v * v / (2.0 * a) + 0.5 * v * 0.05;
            visibility = Some(stop + rng.gen_range(0.55..0.9));
            let s_o = rng.gen_range(70.0..100.0);
            let t_go = (s_o - 5.0) / v + rng.gen_range(5.0..8.0);
            let traj = follow(&line, horizon, |t| (s_o + pull_away(t, t_go, 2.0, v), 0.0));
            agents.push(car("stalled", 0.0, traj));
            triggers.push(Trigger {
                kind: TriggerKind::StoppedObstacle,
                agent: "stalled".into(),
                at_s: 0.0,
            });
        }
    }

    Scenario {
        id,
        kind,
        segments: segments(route.len()),
        length_m: line.length(),
        route,
        agents,
        triggers,
        target_speed_mps: v,
        initial_speed_mps: v,
        visibility_m: visibility,
        timeout_s: 2.0 * length / v + 30.0,
        off_route_m: 3.0,
    }
}

/// Seeded desk suite cycling through straight, cut-in, stopped-obstacle,
/// merge and fog scenarios.
pub fn generate_suite(seed: u64, params: &SuiteParams) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..params.count)
        .map(|i| scenario(i, KINDS[i % KINDS.len()], &mut rng, params.route_length_m))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_is_valid_and_seeded() {
        let a = generate_suite(7, &SuiteParams::default());
        assert_eq!(a.len(), SUITE_SIZE);
        for sc in &a {
            sc.validate().unwrap();
            assert!((sc.length_m - 150.0).abs() < 1.0);
        }
        assert_eq!(a, generate_suite(7, &SuiteParams::default()));
        assert_ne!(a, generate_suite(8, &SuiteParams::default()));
        assert_eq!(a.iter().filter(|s| s.has_stopped_obstacle()).count(), 8);
    }

    #[test]
    fn brake_profile_is_continuous() {
        let f = |t: f64| brake_profile(t, 8.0, 2.0, 4.0, 0.0, 1.0, 2.0);
        for k in 1..200 {
            let t = k as f64 * 0.05;
            assert!(f(t) >= f(t - 0.05) - 1e-12);
            assert!((f(t) - f(t - 1e-6)).abs() < 1e-4);
        }
    }
}
