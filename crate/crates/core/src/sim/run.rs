use serde::{Deserialize, Serialize};

use super::geometry::Polyline;
use super::log::{
    derive_dynamics, detect_blocked, Decision, EndReason, FrameRecord, Infraction, InfractionKind,
    NeighborSample, TrajectoryLog, BLOCKED_DURATION_S, BLOCKED_SPEED_MPS,
};
use super::scenario::{AgentKind, Scenario, ScriptedAgent};
use super::{frames_to_skip, step_ego, Action, EgoState, SimError, VehicleParams};
use crate::cost::LatencyTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencySource {
    Fixed(f64),
    Trace(LatencyTrace),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RtsConfig {
    pub dt: f64,
    pub latency_source: LatencySource,
    pub vehicle: VehicleParams,
    /// Range of the ground-truth obstacle-ahead signal.
    pub trigger_range_m: f64,
    /// Farthest obstacle the policy can observe in clear weather.
    pub sensor_range_m: f64,
    /// Progress within this distance of the route end counts as completion.
    pub completion_tolerance_m: f64,
}

impl Default for RtsConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            latency_source: LatencySource::Fixed(0.05),
            vehicle: VehicleParams::default(),
            trigger_range_m: 30.0,
            sensor_range_m: 80.0,
            completion_tolerance_m: 0.5,
        }
    }
}

impl RtsConfig {
    pub fn with_latency(latency_source: LatencySource) -> Self {
        Self {
            latency_source,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(SimError::InvalidConfig(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if let LatencySource::Fixed(t) = self.latency_source {
            check_latency(t)?;
        }
        for (name, v) in [
            ("trigger_range_m", self.trigger_range_m),
            ("sensor_range_m", self.sensor_range_m),
            ("completion_tolerance_m", self.completion_tolerance_m),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::InvalidConfig(format!(
                    "`{name}` must be non-negative, got {v}"
                )));
            }
        }
        self.vehicle.validate()
    }

    fn latency_at(&self, frame: usize) -> Result<f64, SimError> {
        match &self.latency_source {
            LatencySource::Fixed(t) => Ok(*t),
            LatencySource::Trace(tr) => {
                let t = *tr
                    .frame_latencies_s
                    .get(frame)
                    .ok_or(SimError::TraceExhausted {
                        frame,
                        len: tr.frame_latencies_s.len(),
                    })?;
                check_latency(t)?;
                Ok(t)
            }
        }
    }
}

fn check_latency(t: f64) -> Result<(), SimError> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(SimError::InvalidConfig(format!(
            "latency must be positive, got {t}"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleObservation {
    /// Bumper-to-bumper distance along the route.
    pub gap_m: f64,
    /// Obstacle speed projected on the route direction.
    pub speed_mps: f64,
}

/// What the policy sees at a decision frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: f64,
    pub dt: f64,
    pub ego: EgoState,
    pub target_speed_mps: f64,
    /// Route point `max(5, 0.8·v)` metres ahead of the ego projection.
    pub lookahead: [f64; 2],
    pub progress_m: f64,
    pub lateral_m: f64,
    /// Nearest visible agent on the ego path.
    pub obstacle: Option<ObstacleObservation>,
}

struct World<'a> {
    sc: &'a Scenario,
    line: Polyline,
    appear: Vec<f64>,
    vehicle: &'a VehicleParams,
}

impl<'a> World<'a> {
    fn active(&self, t: f64) -> impl Iterator<Item = &'a ScriptedAgent> + '_ {
        self.sc
            .agents
            .iter()
            .zip(&self.appear)
            .filter(move |(_, &at)| t >= at)
            .map(|(a, _)| a)
    }

    /// Nearest agent on the ego path within `range`.
    fn nearest_in_path(&self, ego: &EgoState, t: f64, range: f64) -> Option<ObstacleObservation> {
        let me = self.line.project([ego.x, ego.y]);
        let mut best: Option<ObstacleObservation> = None;
        for a in self.active(t) {
            let pose = a.pose_at(t);
            let it = self.line.project([pose.x, pose.y]);
            if it.s <= me.s || (it.d - me.d).abs() >= (self.vehicle.width + a.width) / 2.0 + 0.3 {
                continue;
            }
            let gap = (it.s - me.s - (self.vehicle.length + a.length) / 2.0).max(0.0);
            if gap > range || best.is_some_and(|b| b.gap_m <= gap) {
                continue;
            }
            let (_, route_heading) = self.line.sample(it.s);
            best = Some(ObstacleObservation {
                gap_m: gap,
                speed_mps: pose.speed * (pose.heading - route_heading).cos(),
            });
        }
        best
    }
}

fn segment_of(bounds: &[(f64, f64)], s: f64) -> usize {
    bounds
        .iter()
        .position(|&(_, end)| s < end)
        .unwrap_or(bounds.len() - 1)
}

/// Runs one route under the real-time synchronous scheduler.
///
/// At each decision frame the policy is queried and the frame's latency
/// determines how many further frames the action is held for. Collisions
/// freeze route progress; the current hold is still played out so that
/// every decision spans exactly `n + 1` frames.
pub fn run_route<P>(
    sc: &Scenario,
    mut policy: P,
    rts: &RtsConfig,
) -> Result<TrajectoryLog, SimError>
where
    P: FnMut(&Observation) -> Action,
{
    sc.validate()?;
    rts.validate()?;
    let dt = rts.dt;
    let world = World {
        sc,
        line: sc.polyline(),
        appear: sc.agents.iter().map(|a| sc.appear_time(&a.id)).collect(),
        vehicle: &rts.vehicle,
    };
    let length = world.line.length();
    let bounds = sc.segment_bounds(&world.line);
    let (start, heading) = world.line.sample(0.0);
    let initial = EgoState {
        x: start[0],
        y: start[1],
        heading,
        v: sc.initial_speed_mps,
        ..Default::default()
    };

    let mut ego = initial;
    let mut frames: Vec<FrameRecord> = Vec::new();
    let mut decisions = Vec::new();
    let mut infractions = Vec::new();
    let mut progress = 0.0_f64;
    let mut off_route = false;
    let mut stationary = 0usize;
    let mut end: Option<EndReason> = None;

    while end.is_none() {
        let k = frames.len();
        let t = k as f64 * dt;
        if t >= sc.timeout_s {
            end = Some(EndReason::Timeout);
            break;
        }
        let me = world.line.project([ego.x, ego.y]);
        let ld = (0.8 * ego.v).max(5.0);
        let (lookahead, _) = world.line.sample(me.s + ld);
        let range = sc
            .visibility_m
            .map_or(rts.sensor_range_m, |v| v.min(rts.sensor_range_m));
        let obs = Observation {
            t,
            dt,
            ego,
            target_speed_mps: sc.target_speed_mps,
            lookahead,
            progress_m: me.s,
            lateral_m: me.d,
            obstacle: world.nearest_in_path(&ego, t, range),
        };
        let action = policy(&obs).clamped();
        let latency_s = rts.latency_at(k)?;
        let n = frames_to_skip(latency_s, dt);
        decisions.push(Decision {
            frame: k,
            latency_s,
            n_skipped: n,
        });

        for j in 0..=n {
            ego = step_ego(&ego, &action, dt, &rts.vehicle);
            let frame = frames.len();
            let t = (frame + 1) as f64 * dt;
            let here = world.line.project([ego.x, ego.y]);
            let crashed = end == Some(EndReason::Collision);
            if !crashed {
                progress = progress.max(here.s.min(length));
                if progress >= length - rts.completion_tolerance_m {
                    progress = length;
                    end.get_or_insert(EndReason::Completed);
                }
            }
            let segment = segment_of(&bounds, progress);
            if !crashed {
                let footprint = rts.vehicle.footprint(&ego);
                if let Some(hit) = world
                    .active(t)
                    .find(|a| a.footprint_at(t).overlaps(&footprint))
                {
                    let kind = match hit.kind {
                        AgentKind::Vehicle => InfractionKind::CollisionVehicle,
                        AgentKind::Pedestrian => InfractionKind::CollisionPedestrian,
                        AgentKind::Static => InfractionKind::CollisionStatic,
                    };
                    infractions.push(Infraction {
                        frame,
                        kind,
                        segment,
                    });
                    end = Some(EndReason::Collision);
                }
            }
            let outside = here.d.abs() > sc.off_route_m;
            if outside && !off_route {
                infractions.push(Infraction {
                    frame,
                    kind: InfractionKind::OffRoute,
                    segment,
                });
            }
            off_route = outside;
            stationary = if ego.v <= BLOCKED_SPEED_MPS {
                stationary + 1
            } else {
                0
            };
            if stationary as f64 * dt > BLOCKED_DURATION_S {
                end.get_or_insert(EndReason::Blocked);
            }
            let neighbors = world
                .active(t)
                .filter(|a| a.kind == AgentKind::Vehicle)
                .map(|a| {
                    let p = a.pose_at(t);
                    NeighborSample {
                        agent: a.id.clone(),
                        distance_m: (p.x - ego.x).hypot(p.y - ego.y),
                        speed_mps: p.speed,
                    }
                })
                .collect();
            frames.push(FrameRecord {
                t,
                state: ego,
                action,
                n_skipped: n,
                decision: j == 0,
                progress_m: progress,
                lateral_m: here.d,
                obstacle_ahead: world
                    .nearest_in_path(&ego, t, rts.trigger_range_m)
                    .is_some(),
                neighbors,
            });
        }
    }

    let mut log = TrajectoryLog {
        scenario_id: sc.id.clone(),
        dt,
        route_length_m: length,
        segment_completion: bounds
            .iter()
            .map(|&(a, b)| ((progress - a) / (b - a)).clamp(0.0, 1.0))
            .collect(),
        segment_bounds_m: bounds,
        initial_state: initial,
        dynamics: derive_dynamics(&frames.iter().map(|f| f.state).collect::<Vec<_>>(), dt),
        frames,
        decisions,
        infractions,
        end_reason: end.unwrap_or(EndReason::Timeout),
    };
    for iv in detect_blocked(&log, BLOCKED_SPEED_MPS, BLOCKED_DURATION_S) {
        let segment = segment_of(&log.segment_bounds_m, log.frames[iv.start].progress_m);
        log.infractions.push(Infraction {
            frame: iv.start,
            kind: InfractionKind::Blocked,
            segment,
        });
    }
    log.infractions.sort_by_key(|i| i.frame);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scenario::tests::straight;
    use crate::sim::scenario::{AgentWaypoint, ScenarioKind, Trigger, TriggerKind};
    use crate::sim::{builtin_policy, PolicyParams};

    fn driver() -> impl FnMut(&Observation) -> Action {
        let (p, v) = (PolicyParams::default(), VehicleParams::default());
        move |o: &Observation| builtin_policy(o, &p, &v)
    }

    /// A stopped car that appears in the lane one frame after a 1 s
    /// decision boundary, 14 m ahead of an ego cruising at 10 m/s.
    fn sudden_stop() -> Scenario {
        let mut sc = straight("sudden", 150.0);
        sc.kind = ScenarioKind::StoppedObstacle;
        let appear = 2.05;
        let x = 10.0 * appear + 4.6 + 14.0;
        sc.agents.push(ScriptedAgent {
            id: "stalled".into(),
            kind: AgentKind::Vehicle,
            length: 4.6,
            width: 1.9,
            heading: 0.0,
            trajectory: vec![
                AgentWaypoint { t: 0.0, x, y: 0.0 },
                AgentWaypoint { t: 12.0, x, y: 0.0 },
                AgentWaypoint {
                    t: 30.0,
                    x: x + 180.0,
                    y: 0.0,
                },
            ],
        });
        sc.triggers.push(Trigger {
            kind: TriggerKind::Appear,
            agent: "stalled".into(),
            at_s: appear,
        });
        sc
    }

    #[test]
    fn unobstructed_route_completes() {
        let sc = straight("s", 150.0);
        let log = run_route(
            &sc,
            driver(),
            &RtsConfig::with_latency(LatencySource::Fixed(0.01)),
        )
        .unwrap();
        assert_eq!(log.end_reason, EndReason::Completed);
        assert!(log.segment_completion.iter().all(|&rc| rc == 1.0));
        assert!(log.infractions.is_empty());
    }

    #[test]
    fn low_latency_stops_high_latency_collides() {
        let sc = sudden_stop();
        let fast = run_route(
            &sc,
            driver(),
            &RtsConfig::with_latency(LatencySource::Fixed(0.05)),
        )
        .unwrap();
        assert!(!fast.crashed(), "{:?}", fast.infractions);
        assert_eq!(fast.end_reason, EndReason::Completed);
        let slow = run_route(
            &sc,
            driver(),
            &RtsConfig::with_latency(LatencySource::Fixed(1.0)),
        )
        .unwrap();
        assert!(slow.crashed());
        assert_eq!(slow.infractions[0].kind, InfractionKind::CollisionVehicle);
        assert!(slow.segment_completion.iter().any(|&rc| rc < 1.0));
    }

    #[test]
    fn hold_semantics_and_frame_conservation() {
        let sc = sudden_stop();
        let log = run_route(
            &sc,
            driver(),
            &RtsConfig::with_latency(LatencySource::Fixed(0.13)),
        )
        .unwrap();
        let total: usize = log.decisions.iter().map(|d| d.n_skipped + 1).sum();
        assert_eq!(total, log.frames.len());
        for d in &log.decisions {
            assert_eq!(d.n_skipped, 1);
            let held = &log.frames[d.frame..d.frame + 2];
            assert!(held[0].decision && !held[1].decision);
            assert_eq!(held[0].action, held[1].action);
        }
    }

    #[test]
    fn deterministic_and_dynamics_consistent() {
        let sc = sudden_stop();
        let rts = RtsConfig::with_latency(LatencySource::Fixed(0.3));
        let a = run_route(&sc, driver(), &rts).unwrap();
        let b = run_route(&sc, driver(), &rts).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let states: Vec<EgoState> = a.frames.iter().map(|f| f.state).collect();
        assert_eq!(derive_dynamics(&states, rts.dt), a.dynamics);
    }

    #[test]
    fn trace_exhaustion_is_an_error() {
        let sc = straight("s", 150.0);
        let rts = RtsConfig::with_latency(LatencySource::Trace(LatencyTrace::constant(0.05, 10)));
        assert_eq!(
            run_route(&sc, driver(), &rts).unwrap_err(),
            SimError::TraceExhausted { frame: 10, len: 10 }
        );
    }

    #[test]
    fn world_is_latency_independent() {
        let sc = sudden_stop();
        let a = run_route(
            &sc,
            driver(),
            &RtsConfig::with_latency(LatencySource::Fixed(0.05)),
        )
        .unwrap();
        let b = run_route(
            &sc,
            driver(),
            &RtsConfig::with_latency(LatencySource::Fixed(0.4)),
        )
        .unwrap();
        let n = a.frames.len().min(b.frames.len());
        for k in 0..n {
            let (na, nb) = (&a.frames[k].neighbors, &b.frames[k].neighbors);
            assert_eq!(na.len(), nb.len());
            for (x, y) in na.iter().zip(nb) {
                assert_eq!(x.speed_mps, y.speed_mps);
            }
        }
    }

    #[test]
    fn stationary_ego_gets_blocked() {
        let mut sc = straight("s", 150.0);
        sc.initial_speed_mps = 0.0;
        sc.timeout_s = 100.0;
        let log = run_route(
            &sc,
            |_: &Observation| Action::default(),
            &RtsConfig::default(),
        )
        .unwrap();
        assert_eq!(log.end_reason, EndReason::Blocked);
        assert!(log
            .infractions
            .iter()
            .any(|i| i.kind == InfractionKind::Blocked));
    }

    #[test]
    fn invalid_latency_rejected() {
        let sc = straight("s", 50.0);
        let rts = RtsConfig::with_latency(LatencySource::Fixed(0.0));
        assert!(matches!(
            run_route(&sc, driver(), &rts),
            Err(SimError::InvalidConfig(_))
        ));
    }
}
