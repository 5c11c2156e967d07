use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{estimate_graph_latency, CostError, HardwareProfile};
use crate::ir::{Graph, ModuleTag};

/// Added latency of a conditionally triggered planner optimizer.
pub const DEFAULT_SPIKE_S: f64 = 0.150;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTrace {
    pub frame_latencies_s: Vec<f64>,
    pub spike_frames: BTreeSet<usize>,
    pub seed: u64,
}

impl LatencyTrace {
    pub fn constant(latency_s: f64, n_frames: usize) -> Self {
        Self {
            frame_latencies_s: vec![latency_s; n_frames],
            spike_frames: BTreeSet::new(),
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.frame_latencies_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_latencies_s.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.frame_latencies_s.iter().sum::<f64>() / self.len().max(1) as f64
    }

    /// `frame,latency_s,spiked` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,latency_s,spiked\n");
        for (i, t) in self.frame_latencies_s.iter().enumerate() {
            let _ = writeln!(s, "{i},{t},{}", self.spike_frames.contains(&i));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeTrigger {
    /// Fires on frames where the trigger signal is set.
    ObstacleAhead,
    /// Fires independently on each frame with the given probability.
    Probability(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeRule {
    pub trigger: SpikeTrigger,
    #[serde(default = "default_spike")]
    pub added_latency_s: f64,
    /// The rule only applies while the graph still contains this module.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requires_module: Option<ModuleTag>,
}

fn default_spike() -> f64 {
    DEFAULT_SPIKE_S
}

impl SpikeRule {
    pub fn obstacle_ahead() -> Self {
        Self {
            trigger: SpikeTrigger::ObstacleAhead,
            added_latency_s: DEFAULT_SPIKE_S,
            requires_module: None,
        }
    }

    pub fn probability(p: f64) -> Self {
        Self {
            trigger: SpikeTrigger::Probability(p),
            added_latency_s: DEFAULT_SPIKE_S,
            requires_module: None,
        }
    }

    fn validate(&self) -> Result<(), CostError> {
        if !(self.added_latency_s.is_finite() && self.added_latency_s >= 0.0) {
            return Err(CostError::InvalidRule(format!(
                "added latency {} is negative",
                self.added_latency_s
            )));
        }
        if let SpikeTrigger::Probability(p) = self.trigger {
            if !(0.0..=1.0).contains(&p) {
                return Err(CostError::InvalidRule(format!(
                    "probability {p} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Per-frame latencies: `base_s` plus every rule that fires on the frame.
pub fn trace_from_base(
    base_s: f64,
    n_frames: usize,
    rules: &[SpikeRule],
    trigger_signal: Option<&[bool]>,
    seed: u64,
) -> Result<LatencyTrace, CostError> {
    for r in rules {
        r.validate()?;
    }
    let needs_signal = rules
        .iter()
        .any(|r| r.trigger == SpikeTrigger::ObstacleAhead);
    if needs_signal {
        let got = trigger_signal.map_or(0, <[bool]>::len);
        if got != n_frames {
            return Err(CostError::TriggerLength {
                expected: n_frames,
                got,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = LatencyTrace {
        frame_latencies_s: Vec::with_capacity(n_frames),
        spike_frames: BTreeSet::new(),
        seed,
    };
    for k in 0..n_frames {
        let mut t = base_s;
        for r in rules {
            let fired = match r.trigger {
                SpikeTrigger::ObstacleAhead => trigger_signal.is_some_and(|s| s[k]),
                SpikeTrigger::Probability(p) => rng.gen::<f64>() < p,
            };
            if fired {
                t += r.added_latency_s;
                trace.spike_frames.insert(k);
            }
        }
        trace.frame_latencies_s.push(t);
    }
    Ok(trace)
}

/// Latency trace for `g` under `hw`. Rules tied to a module the graph no
/// longer contains are skipped.
pub fn generate_latency_trace(
    g: &Graph,
    hw: &HardwareProfile,
    n_frames: usize,
    rules: &[SpikeRule],
    trigger_signal: Option<&[bool]>,
    seed: u64,
) -> Result<LatencyTrace, CostError> {
    hw.validate()?;
    let base = estimate_graph_latency(g, hw)?;
    let active: Vec<SpikeRule> = rules
        .iter()
        .filter(|r| r.requires_module.is_none_or(|tag| g.count_by_tag(tag) > 0))
        .cloned()
        .collect();
    trace_from_base(base, n_frames, &active, trigger_signal, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_rules_gives_constant_trace() {
        let t = trace_from_base(0.03, 50, &[], None, 1).unwrap();
        assert!(t.frame_latencies_s.iter().all(|&v| v == 0.03));
        assert!(t.spike_frames.is_empty());
    }

    #[test]
    fn obstacle_spikes_follow_signal() {
        let mut signal = vec![false; 20];
        signal[10] = true;
        signal[11] = true;
        let t =
            trace_from_base(0.03, 20, &[SpikeRule::obstacle_ahead()], Some(&signal), 1).unwrap();
        assert_eq!(t.spike_frames, BTreeSet::from([10, 11]));
        assert_eq!(t.frame_latencies_s[10], 0.03 + 0.150);
        assert_eq!(t.frame_latencies_s[9], 0.03);
    }

    #[test]
    fn probability_rate_is_close() {
        let t = trace_from_base(0.03, 10_000, &[SpikeRule::probability(0.05)], None, 42).unwrap();
        let rate = t.spike_frames.len() as f64 / 10_000.0;
        assert!((rate - 0.05).abs() <= 0.01, "{rate}");
        let again =
            trace_from_base(0.03, 10_000, &[SpikeRule::probability(0.05)], None, 42).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn signal_length_is_checked() {
        let e =
            trace_from_base(0.03, 5, &[SpikeRule::obstacle_ahead()], Some(&[true]), 0).unwrap_err();
        assert_eq!(
            e,
            CostError::TriggerLength {
                expected: 5,
                got: 1
            }
        );
    }
}
