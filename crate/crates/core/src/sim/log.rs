use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::geometry::wrap_angle;
use super::{Action, EgoState};

pub const BLOCKED_SPEED_MPS: f64 = 0.1;
pub const BLOCKED_DURATION_S: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfractionKind {
    CollisionPedestrian,
    CollisionVehicle,
    CollisionStatic,
    RedLight,
    OffRoute,
    Blocked,
}

impl InfractionKind {
    pub fn is_collision(self) -> bool {
        matches!(
            self,
            Self::CollisionPedestrian | Self::CollisionVehicle | Self::CollisionStatic
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Infraction {
    pub frame: usize,
    pub kind: InfractionKind,
    /// Road segment the ego occupied when the infraction happened.
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSample {
    pub agent: String,
    pub distance_m: f64,
    pub speed_mps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    /// Simulated time at the end of the frame.
    pub t: f64,
    /// Ego state at the end of the frame.
    pub state: EgoState,
    /// Action applied during the frame.
    pub action: Action,
    /// Skip count of the decision that produced the action.
    pub n_skipped: usize,
    /// Whether the policy was queried at the start of this frame.
    pub decision: bool,
    pub progress_m: f64,
    pub lateral_m: f64,
    /// Ground truth: an agent occupies the ego path within the trigger range.
    pub obstacle_ahead: bool,
    #[serde(default)]
    pub neighbors: Vec<NeighborSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub frame: usize,
    pub latency_s: f64,
    pub n_skipped: usize,
}

/// Comfort variables of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Dynamics {
    pub lon_accel: f64,
    pub lat_accel: f64,
    pub yaw_rate: f64,
    pub yaw_accel: f64,
    pub lon_jerk: f64,
    pub jerk: f64,
}

impl Dynamics {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.lon_accel,
            self.lat_accel,
            self.yaw_rate,
            self.yaw_accel,
            self.lon_jerk,
            self.jerk,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Completed,
    Collision,
    Timeout,
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub scenario_id: String,
    pub dt: f64,
    pub route_length_m: f64,
    /// Arc-length range of each road segment.
    pub segment_bounds_m: Vec<(f64, f64)>,
    pub initial_state: EgoState,
    pub frames: Vec<FrameRecord>,
    pub dynamics: Vec<Dynamics>,
    pub decisions: Vec<Decision>,
    pub infractions: Vec<Infraction>,
    /// Final completion ratio RC_i of each segment.
    pub segment_completion: Vec<f64>,
    pub end_reason: EndReason,
}

/// Finite-difference dynamics of a state sequence. First differences are
/// zero on the first frame and second differences on the first two.
pub fn derive_dynamics(states: &[EgoState], dt: f64) -> Vec<Dynamics> {
    let mut out: Vec<Dynamics> = Vec::with_capacity(states.len());
    for k in 0..states.len() {
        let mut d = Dynamics::default();
        if k >= 1 {
            let (prev, cur) = (&states[k - 1], &states[k]);
            d.lon_accel = (cur.v - prev.v) / dt;
            d.yaw_rate = wrap_angle(cur.heading - prev.heading) / dt;
            d.lat_accel = cur.v * d.yaw_rate;
        }
        if k >= 2 {
            let prev = &out[k - 1];
            d.yaw_accel = (d.yaw_rate - prev.yaw_rate) / dt;
            d.lon_jerk = (d.lon_accel - prev.lon_accel) / dt;
            let lat_jerk = (d.lat_accel - prev.lat_accel) / dt;
            d.jerk = d.lon_jerk.hypot(lat_jerk);
        }
        out.push(d);
    }
    out
}

/// Maximal half-open frame range `[start, end)` where the ego is stationary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockedInterval {
    pub start: usize,
    pub end: usize,
}

impl BlockedInterval {
    pub fn contains(&self, frame: usize) -> bool {
        (self.start..self.end).contains(&frame)
    }
}

/// Maximal runs with speed at most `speed_threshold` lasting strictly longer
/// than `duration_s`.
pub fn detect_blocked(
    log: &TrajectoryLog,
    speed_threshold: f64,
    duration_s: f64,
) -> Vec<BlockedInterval> {
    let mut out = Vec::new();
    let mut start = None;
    let n = log.frames.len();
    for k in 0..=n {
        let slow = k < n && log.frames[k].state.v <= speed_threshold;
        match (slow, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                if (k - s) as f64 * log.dt > duration_s {
                    out.push(BlockedInterval { start: s, end: k });
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

impl TrajectoryLog {
    pub fn crashed(&self) -> bool {
        self.infractions.iter().any(|i| i.kind.is_collision())
    }

    pub fn max_progress_m(&self) -> f64 {
        self.frames.iter().map(|f| f.progress_m).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "frame,t,x,y,heading,v,steer,throttle,brake,n_skipped,decision,progress_m,lateral_m,\
             lon_accel,lat_accel,yaw_rate,yaw_accel,lon_jerk,jerk\n",
        );
        for (k, (f, d)) in self.frames.iter().zip(&self.dynamics).enumerate() {
            let st = &f.state;
            let _ = writeln!(
                s,
                "{k},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                f.t,
                st.x,
                st.y,
                st.heading,
                st.v,
                f.action.steer,
                f.action.throttle,
                f.action.brake,
                f.n_skipped,
                u8::from(f.decision),
                f.progress_m,
                f.lateral_m,
                d.lon_accel,
                d.lat_accel,
                d.yaw_rate,
                d.yaw_accel,
                d.lon_jerk,
                d.jerk
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn stationary_log(speeds: &[f64], dt: f64) -> TrajectoryLog {
        TrajectoryLog {
            scenario_id: "t".into(),
            dt,
            route_length_m: 100.0,
            segment_bounds_m: vec![(0.0, 100.0)],
            initial_state: EgoState::default(),
            frames: speeds
                .iter()
                .enumerate()
                .map(|(k, &v)| FrameRecord {
                    t: (k + 1) as f64 * dt,
                    state: EgoState {
                        v,
                        ..Default::default()
                    },
                    action: Action::default(),
                    n_skipped: 0,
                    decision: true,
                    progress_m: 0.0,
                    lateral_m: 0.0,
                    obstacle_ahead: false,
                    neighbors: vec![],
                })
                .collect(),
            dynamics: vec![Dynamics::default(); speeds.len()],
            decisions: vec![],
            infractions: vec![],
            segment_completion: vec![0.0],
            end_reason: EndReason::Timeout,
        }
    }

    #[test]
    fn blocked_requires_strictly_longer_than_duration() {
        let mut v = vec![5.0; 100];
        v.extend(vec![0.0; 1220]);
        v.extend(vec![5.0; 100]);
        let log = stationary_log(&v, 0.05);
        assert_eq!(
            detect_blocked(&log, 0.1, 60.0),
            vec![BlockedInterval {
                start: 100,
                end: 1320
            }]
        );
        let mut short = vec![5.0; 10];
        short.extend(vec![0.05; 1180]);
        assert!(detect_blocked(&stationary_log(&short, 0.05), 0.1, 60.0).is_empty());
        assert!(detect_blocked(&stationary_log(&[5.0; 2000], 0.05), 0.1, 60.0).is_empty());
        let exactly = stationary_log(&[0.0; 1200], 0.05);
        assert_eq!(
            detect_blocked(&exactly, 0.1, 60.0).len(),
            usize::from(1200.0 * 0.05 > 60.0)
        );
    }

    #[test]
    fn blocked_run_at_end_of_log() {
        let mut v = vec![3.0; 5];
        v.extend(vec![0.0; 30]);
        let ivs = detect_blocked(&stationary_log(&v, 1.0), 0.1, 20.0);
        assert_eq!(ivs, vec![BlockedInterval { start: 5, end: 35 }]);
        assert!(ivs[0].contains(34) && !ivs[0].contains(35));
    }

    #[test]
    fn dynamics_of_constant_turn() {
        let dt = 0.1;
        let states: Vec<EgoState> = (0..5)
            .map(|k| EgoState {
                v: 2.0,
                heading: 0.1 * k as f64,
                ..Default::default()
            })
            .collect();
        let d = derive_dynamics(&states, dt);
        assert_eq!(d[0], Dynamics::default());
        assert!((d[1].yaw_rate - 1.0).abs() < 1e-12);
        assert!((d[1].lat_accel - 2.0).abs() < 1e-12);
        assert_eq!(d[1].yaw_accel, 0.0);
        assert!(d[3].yaw_accel.abs() < 1e-9 && d[3].lon_accel == 0.0);
    }

    #[test]
    fn dynamics_handle_heading_wrap() {
        let pi = std::f64::consts::PI;
        let states = [
            EgoState {
                heading: pi - 0.01,
                v: 1.0,
                ..Default::default()
            },
            EgoState {
                heading: -pi + 0.01,
                v: 1.0,
                ..Default::default()
            },
        ];
        let d = derive_dynamics(&states, 0.1);
        assert!((d[1].yaw_rate - 0.2).abs() < 1e-9);
    }
}
