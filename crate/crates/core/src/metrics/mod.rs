//! Closed-loop driving metrics and the composite EER_AV score.
//!
//! Per route: driving safety (DS), driving efficiency (DE) and driving
//! comfort (DC). Across routes: min-max normalization, CRITIC weights and
//! the crash-gated weighted score whose mean is EER_AV.

mod critic;
mod score;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{
    detect_blocked, Dynamics, InfractionKind, TrajectoryLog, BLOCKED_DURATION_S, BLOCKED_SPEED_MPS,
};

pub use critic::{critic_weights, normalize};
pub use score::{
    eer_av, evaluate, evaluate_joint, route_score, EnergySign, EvaluationReport, Indicators,
    RouteMetrics, Summary, Weights, WeightsMode,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("driving score needs at least one road segment")]
    NoSegments,
    #[error("CRITIC weighting needs at least 2 routes, got {0}")]
    TooFewRoutes(usize),
    #[error("EER_AV of an empty route set")]
    NoRoutes,
    #[error("invalid penalty table: {0}")]
    InvalidPenalty(String),
    #[error("invalid comfort thresholds: {0}")]
    InvalidThresholds(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("indicator rows have inconsistent widths")]
    Ragged,
}

/// Multiplicative penalty per infraction kind. Kinds without an entry are
/// not penalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PenaltyTable(pub BTreeMap<InfractionKind, f64>);

impl Default for PenaltyTable {
    fn default() -> Self {
        use InfractionKind::*;
        Self(BTreeMap::from([
            (CollisionPedestrian, 0.50),
            (CollisionVehicle, 0.60),
            (CollisionStatic, 0.65),
            (RedLight, 0.70),
            (OffRoute, 0.70),
        ]))
    }
}

impl PenaltyTable {
    pub fn coefficient(&self, kind: InfractionKind) -> f64 {
        self.0.get(&kind).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        for (k, &p) in &self.0 {
            if !(p > 0.0 && p <= 1.0) {
                return Err(MetricsError::InvalidPenalty(format!(
                    "{k:?} = {p} is outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Inclusive `(lower, upper)` bounds on the six comfort variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComfortThresholds {
    pub lon_accel: (f64, f64),
    pub lat_accel: (f64, f64),
    pub yaw_rate: (f64, f64),
    pub yaw_accel: (f64, f64),
    pub lon_jerk: (f64, f64),
    pub jerk: (f64, f64),
}

impl Default for ComfortThresholds {
    fn default() -> Self {
        Self {
            lon_accel: (-4.05, 2.40),
            lat_accel: (-4.89, 4.89),
            yaw_rate: (-0.95, 0.95),
            yaw_accel: (-1.93, 1.93),
            lon_jerk: (-4.13, 4.13),
            jerk: (-8.37, 8.37),
        }
    }
}

impl ComfortThresholds {
    pub fn as_array(&self) -> [(f64, f64); 6] {
        [
            self.lon_accel,
            self.lat_accel,
            self.yaw_rate,
            self.yaw_accel,
            self.lon_jerk,
            self.jerk,
        ]
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        for (i, (lo, hi)) in self.as_array().into_iter().enumerate() {
            if !(lo < hi) {
                return Err(MetricsError::InvalidThresholds(format!(
                    "bound {i}: {lo} is not below {hi}"
                )));
            }
        }
        Ok(())
    }

    pub fn passes(&self, d: &Dynamics) -> bool {
        self.as_array()
            .iter()
            .zip(d.as_array())
            .all(|(&(lo, hi), v)| lo <= v && v <= hi)
    }
}

/// Completion and infractions of one road segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentOutcome {
    pub completion: f64,
    pub infractions: Vec<InfractionKind>,
}

pub fn segment_outcomes(log: &TrajectoryLog) -> Vec<SegmentOutcome> {
    let mut out: Vec<SegmentOutcome> = log
        .segment_completion
        .iter()
        .map(|&completion| SegmentOutcome {
            completion,
            infractions: Vec::new(),
        })
        .collect();
    for inf in &log.infractions {
        if let Some(seg) = out.get_mut(inf.segment) {
            seg.infractions.push(inf.kind);
        }
    }
    out
}

/// `100 · mean_i(RC_i · Π_j P_ij)`.
pub fn compute_ds(
    segments: &[SegmentOutcome],
    penalties: &PenaltyTable,
) -> Result<f64, MetricsError> {
    if segments.is_empty() {
        return Err(MetricsError::NoSegments);
    }
    let sum: f64 = segments
        .iter()
        .map(|s| {
            s.infractions
                .iter()
                .fold(s.completion, |acc, &k| acc * penalties.coefficient(k))
        })
        .sum();
    Ok(100.0 * sum / segments.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeParams {
    pub checkpoints: usize,
    pub neighbor_radius_m: f64,
    /// Ratios above this percentage are discarded.
    pub outlier_pct: f64,
    /// Routes that never pass this fraction of their length are excluded.
    pub min_progress: f64,
}

impl Default for DeParams {
    fn default() -> Self {
        Self {
            checkpoints: 20,
            neighbor_radius_m: 50.0,
            outlier_pct: 1000.0,
            min_progress: 0.05,
        }
    }
}

/// Driving efficiency in percent, or `None` when the route is excluded.
///
/// Checkpoints sit at `k·L/M` for `k = 1..=M`. At the first frame reaching
/// each checkpoint the ego speed is divided by the mean speed of vehicles
/// within the neighbour radius; checkpoints without moving neighbours are
/// skipped.
pub fn compute_de(log: &TrajectoryLog, p: &DeParams) -> Option<f64> {
    let length = log.route_length_m;
    if !(length > 0.0) || log.max_progress_m() < p.min_progress * length || p.checkpoints == 0 {
        return None;
    }
    let mut ratios = Vec::new();
    for k in 1..=p.checkpoints {
        let s = k as f64 * length / p.checkpoints as f64;
        let Some(frame) = log.frames.iter().find(|f| f.progress_m >= s) else {
            break;
        };
        let near: Vec<f64> = frame
            .neighbors
            .iter()
            .filter(|n| n.distance_m <= p.neighbor_radius_m)
            .map(|n| n.speed_mps)
            .collect();
        if near.is_empty() {
            continue;
        }
        let mean = near.iter().sum::<f64>() / near.len() as f64;
        if mean <= 0.0 {
            continue;
        }
        let ratio = frame.state.v / mean;
        if 100.0 * ratio <= p.outlier_pct {
            ratios.push(ratio);
        }
    }
    if ratios.is_empty() {
        return None;
    }
    Some(100.0 * ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Fraction of complete `segment_len`-frame windows in which every frame is
/// within the comfort thresholds. Frames inside blocked intervals pass.
/// `None` when the log is shorter than one window.
pub fn compute_dc(
    log: &TrajectoryLog,
    thresholds: &ComfortThresholds,
    segment_len: usize,
) -> Option<f64> {
    let segment_len = segment_len.max(1);
    let n_seg = log.dynamics.len() / segment_len;
    if n_seg == 0 {
        return None;
    }
    let blocked = detect_blocked(log, BLOCKED_SPEED_MPS, BLOCKED_DURATION_S);
    let pass =
        |k: usize| blocked.iter().any(|b| b.contains(k)) || thresholds.passes(&log.dynamics[k]);
    let smooth = (0..n_seg)
        .filter(|&s| (s * segment_len..(s + 1) * segment_len).all(pass))
        .count();
    Some(smooth as f64 / n_seg as f64)
}
