use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::geometry::{Obb, Polyline};
use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Straight,
    CutIn,
    StoppedObstacle,
    Merge,
    Fog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentWaypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedAgent {
    pub id: String,
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
    /// Heading used while the agent has not moved yet.
    #[serde(default)]
    pub heading: f64,
    /// Timestamped positions, linearly interpolated and held at both ends.
    pub trajectory: Vec<AgentWaypoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl ScriptedAgent {
    fn segment_heading(&self, i: usize) -> Option<f64> {
        let (a, b) = (self.trajectory[i], self.trajectory[i + 1]);
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        (dx.hypot(dy) > 1e-9).then(|| dy.atan2(dx))
    }

    fn heading_before(&self, seg: usize) -> f64 {
        (0..seg)
            .rev()
            .find_map(|i| self.segment_heading(i))
            .unwrap_or(self.heading)
    }

    /// Scripted pose at time `t`.
    pub fn pose_at(&self, t: f64) -> AgentPose {
        let w = &self.trajectory;
        let last = w.len() - 1;
        if t <= w[0].t || last == 0 {
            return AgentPose {
                x: w[0].x,
                y: w[0].y,
                heading: self.heading,
                speed: 0.0,
            };
        }
        if t >= w[last].t {
            return AgentPose {
                x: w[last].x,
                y: w[last].y,
                heading: self.heading_before(last),
                speed: 0.0,
            };
        }
        let i = w.iter().position(|p| p.t > t).unwrap_or(last) - 1;
        let (a, b) = (w[i], w[i + 1]);
        let u = (t - a.t) / (b.t - a.t);
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        AgentPose {
            x: a.x + u * dx,
            y: a.y + u * dy,
            heading: self
                .segment_heading(i)
                .unwrap_or_else(|| self.heading_before(i)),
            speed: dx.hypot(dy) / (b.t - a.t),
        }
    }

    pub fn footprint_at(&self, t: f64) -> Obb {
        let p = self.pose_at(t);
        Obb {
            center: [p.x, p.y],
            heading: p.heading,
            length: self.length,
            width: self.width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    /// The agent does not exist before the trigger time.
    Appear,
    /// Annotations of when a scripted manoeuvre starts.
    CutIn,
    StoppedObstacle,
    Merge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub kind: TriggerKind,
    pub agent: String,
    pub at_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub kind: ScenarioKind,
    pub route: Vec<[f64; 2]>,
    /// Inclusive waypoint index ranges of the route's road segments.
    pub segments: Vec<(usize, usize)>,
    #[serde(default)]
    pub agents: Vec<ScriptedAgent>,
    #[serde(default)]
    pub triggers: Vec<Trigger>,
    pub length_m: f64,
    pub target_speed_mps: f64,
    #[serde(default)]
    pub initial_speed_mps: f64,
    /// Obstacles farther than this are invisible to the policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility_m: Option<f64>,
    pub timeout_s: f64,
    #[serde(default = "default_off_route")]
    pub off_route_m: f64,
}

fn default_off_route() -> f64 {
    3.0
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let orient = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| {
        (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    };
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

impl Scenario {
    pub fn polyline(&self) -> Polyline {
        Polyline::new(self.route.clone())
    }

    pub fn has_stopped_obstacle(&self) -> bool {
        matches!(self.kind, ScenarioKind::StoppedObstacle | ScenarioKind::Fog)
    }

    /// Time at which an agent starts to exist.
    pub fn appear_time(&self, agent: &str) -> f64 {
        self.triggers
            .iter()
            .filter(|t| t.kind == TriggerKind::Appear && t.agent == agent)
            .map(|t| t.at_s)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Arc-length boundaries of every segment.
    pub fn segment_bounds(&self, line: &Polyline) -> Vec<(f64, f64)> {
        self.segments
            .iter()
            .map(|&(a, b)| (line.cumulative[a], line.cumulative[b]))
            .collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |reason: String| {
            Err(SimError::InvalidScenario {
                id: self.id.clone(),
                reason,
            })
        };
        if self.route.len() < 2 {
            return bad("route needs at least two waypoints".into());
        }
        if self.route.iter().flatten().any(|v| !v.is_finite()) {
            return bad("route has non-finite coordinates".into());
        }
        for w in self.route.windows(2) {
            if (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]) < 1e-6 {
                return bad("route has repeated waypoints".into());
            }
        }
        let n = self.route.len();
        for i in 0..n - 1 {
            for j in i + 2..n - 1 {
                if segments_cross(
                    self.route[i],
                    self.route[i + 1],
                    self.route[j],
                    self.route[j + 1],
                ) {
                    return bad(format!(
                        "route intersects itself between waypoints {i} and {j}"
                    ));
                }
            }
        }
        if self.segments.is_empty() {
            return bad("no road segments".into());
        }
        let mut expect = 0;
        for &(a, b) in &self.segments {
            if a != expect || b <= a || b >= n {
                return bad(format!(
                    "segments must tile waypoints 0..{} contiguously",
                    n - 1
                ));
            }
            expect = b;
        }
        if expect != n - 1 {
            return bad("segments do not reach the end of the route".into());
        }
        let positive = [
            ("length_m", self.length_m),
            ("target_speed_mps", self.target_speed_mps),
            ("timeout_s", self.timeout_s),
            ("off_route_m", self.off_route_m),
            ("visibility_m", self.visibility_m.unwrap_or(1.0)),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("`{name}` must be positive, got {v}"));
            }
        }
        if !(self.initial_speed_mps.is_finite() && self.initial_speed_mps >= 0.0) {
            return bad("`initial_speed_mps` must be non-negative".into());
        }
        let mut ids = BTreeSet::new();
        for a in &self.agents {
            if !ids.insert(a.id.as_str()) {
                return bad(format!("duplicate agent `{}`", a.id));
            }
            if !(a.length > 0.0 && a.width > 0.0) {
                return bad(format!("agent `{}` has a non-positive footprint", a.id));
            }
            if a.trajectory.is_empty() {
                return bad(format!("agent `{}` has no trajectory", a.id));
            }
            if a.trajectory.windows(2).any(|w| !(w[1].t > w[0].t)) {
                return bad(format!(
                    "agent `{}` timestamps must increase strictly",
                    a.id
                ));
            }
        }
        for t in &self.triggers {
            if !ids.contains(t.agent.as_str()) {
                return bad(format!("trigger references unknown agent `{}`", t.agent));
            }
            if !t.at_s.is_finite() {
                return bad("trigger time must be finite".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    fn agent() -> ScriptedAgent {
        ScriptedAgent {
            id: "a".into(),
            kind: AgentKind::Vehicle,
            length: 4.0,
            width: 2.0,
            heading: 0.5,
            trajectory: vec![
                AgentWaypoint {
                    t: 1.0,
                    x: 0.0,
                    y: 0.0,
                },
                AgentWaypoint {
                    t: 3.0,
                    x: 10.0,
                    y: 0.0,
                },
                AgentWaypoint {
                    t: 5.0,
                    x: 10.0,
                    y: 0.0,
                },
            ],
        }
    }

    pub(crate) fn straight(id: &str, len: f64) -> Scenario {
        let n = (len / 5.0) as usize;
        Scenario {
            id: id.into(),
            kind: ScenarioKind::Straight,
            route: (0..=n).map(|i| [i as f64 * 5.0, 0.0]).collect(),
            segments: vec![(0, n / 2), (n / 2, n)],
            agents: vec![],
            triggers: vec![],
            length_m: len,
            target_speed_mps: 10.0,
            initial_speed_mps: 10.0,
            visibility_m: None,
            timeout_s: 60.0,
            off_route_m: 3.0,
        }
    }

    #[test]
    fn agent_interpolation() {
        let a = agent();
        let p = a.pose_at(2.0);
        assert_eq!((p.x, p.y, p.heading, p.speed), (5.0, 0.0, 0.0, 5.0));
        let before = a.pose_at(0.0);
        assert_eq!((before.x, before.heading, before.speed), (0.0, 0.5, 0.0));
        let parked = a.pose_at(4.0);
        assert_eq!((parked.x, parked.heading, parked.speed), (10.0, 0.0, 0.0));
        assert_eq!(a.pose_at(9.0).x, 10.0);
    }

    #[test]
    fn validation_catches_errors() {
        let sc = straight("s", 150.0);
        assert!(sc.validate().is_ok());
        let mut gap = sc.clone();
        gap.segments = vec![(0, 10), (11, 30)];
        assert!(gap.validate().is_err());
        let mut loops = sc.clone();
        loops.route = vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [5.0, -5.0]];
        loops.segments = vec![(0, 3)];
        assert!(loops.validate().is_err());
        let mut dangling = sc.clone();
        dangling.triggers.push(Trigger {
            kind: TriggerKind::Appear,
            agent: "ghost".into(),
            at_s: 1.0,
        });
        assert!(dangling.validate().is_err());
        let mut slow = sc;
        slow.target_speed_mps = 0.0;
        assert!(slow.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut sc = straight("s", 50.0);
        sc.agents.push(agent());
        sc.triggers.push(Trigger {
            kind: TriggerKind::Appear,
            agent: "a".into(),
            at_s: 2.0,
        });
        let text = serde_json::to_string(&sc).unwrap();
        let back: Scenario = serde_json::from_str(&text).unwrap();
        assert_eq!(back, sc);
        assert_eq!(back.appear_time("a"), 2.0);
        assert_eq!(back.appear_time("b"), f64::NEG_INFINITY);
    }
}
