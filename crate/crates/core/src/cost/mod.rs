//! Analytic latency and energy model.
//!
//! Every node costs `max(compute, memory)` plus a fixed launch overhead.
//! Compute time is FLOPs over peak throughput (divided by the int8 speedup
//! for int8 nodes); memory time is the bytes a node reads and writes over
//! bandwidth. Fused nodes only touch their external operands, so fusion
//! saves both launches and intermediate traffic.

mod flops;
mod trace;
mod window;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{Graph, IrError, Node, NodeKind};

pub use flops::node_flops;
pub use trace::{
    generate_latency_trace, trace_from_base, LatencyTrace, SpikeRule, SpikeTrigger, DEFAULT_SPIKE_S,
};
pub use window::{sliding_window_energy, warmup_frames};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("invalid hardware profile: {0}")]
    InvalidProfile(String),
    #[error("invalid spike rule: {0}")]
    InvalidRule(String),
    #[error("trigger signal has {got} frames, expected {expected}")]
    TriggerLength { expected: usize, got: usize },
    #[error("need at least {needed} frames for warm-up plus one window, got {got}")]
    InsufficientFrames { needed: usize, got: usize },
    #[error(transparent)]
    Ir(#[from] IrError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareProfile {
    pub flops_per_second_f32: f64,
    pub int8_speedup: f64,
    pub launch_overhead_s: f64,
    pub bytes_per_second: f64,
    pub joules_per_flop: f64,
    pub joules_per_byte: f64,
    pub idle_power_w: f64,
}

impl Default for HardwareProfile {
    fn default() -> Self {
        Self {
            flops_per_second_f32: 2.0e9,
            int8_speedup: 2.0,
            launch_overhead_s: 5.0e-6,
            bytes_per_second: 1.0e9,
            joules_per_flop: 2.0e-9,
            joules_per_byte: 1.0e-9,
            idle_power_w: 5.0,
        }
    }
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<(), CostError> {
        let positive = [
            ("flops_per_second_f32", self.flops_per_second_f32),
            ("int8_speedup", self.int8_speedup),
            ("launch_overhead_s", self.launch_overhead_s),
            ("bytes_per_second", self.bytes_per_second),
            ("joules_per_flop", self.joules_per_flop),
            ("joules_per_byte", self.joules_per_byte),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(CostError::InvalidProfile(format!(
                    "`{name}` must be positive, got {v}"
                )));
            }
        }
        if !(self.idle_power_w.is_finite() && self.idle_power_w >= 0.0) {
            return Err(CostError::InvalidProfile(format!(
                "`idle_power_w` must be non-negative, got {}",
                self.idle_power_w
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCost {
    pub id: String,
    pub flops: u64,
    pub bytes: u64,
    pub compute_s: f64,
    pub memory_s: f64,
    pub latency_s: f64,
}

/// Bytes read and written by a node. Constants and reshapes are free.
pub fn node_bytes(g: &Graph, node: &Node) -> Result<u64, IrError> {
    if matches!(node.kind, NodeKind::Constant | NodeKind::Reshape) {
        return Ok(0);
    }
    let mut total = 0u64;
    for t in node.inputs.iter().chain(&node.outputs) {
        total += g.spec(t)?.bytes() as u64;
    }
    Ok(total)
}

pub fn node_cost(g: &Graph, node: &Node, hw: &HardwareProfile) -> Result<NodeCost, IrError> {
    let flops = node_flops(g, node)?;
    let bytes = node_bytes(g, node)?;
    let mut compute_s = flops as f64 / hw.flops_per_second_f32;
    if node.is_int8() {
        compute_s /= hw.int8_speedup;
    }
    let memory_s = bytes as f64 / hw.bytes_per_second;
    Ok(NodeCost {
        id: node.id.clone(),
        flops,
        bytes,
        compute_s,
        memory_s,
        latency_s: compute_s.max(memory_s) + hw.launch_overhead_s,
    })
}

pub fn node_costs(g: &Graph, hw: &HardwareProfile) -> Result<Vec<NodeCost>, IrError> {
    g.nodes.iter().map(|n| node_cost(g, n, hw)).collect()
}

/// Base per-frame inference latency in seconds.
pub fn estimate_graph_latency(g: &Graph, hw: &HardwareProfile) -> Result<f64, IrError> {
    Ok(node_costs(g, hw)?.iter().map(|c| c.latency_s).sum())
}

/// Switching energy of one inference, without the idle term.
pub fn dynamic_energy(g: &Graph, hw: &HardwareProfile) -> Result<f64, IrError> {
    let mut e = 0.0;
    for node in &g.nodes {
        let mut flops = node_flops(g, node)? as f64;
        if node.is_int8() {
            flops /= hw.int8_speedup;
        }
        e += flops * hw.joules_per_flop + node_bytes(g, node)? as f64 * hw.joules_per_byte;
    }
    Ok(e)
}

/// Joules per frame at the base latency.
pub fn estimate_frame_energy(g: &Graph, hw: &HardwareProfile) -> Result<f64, IrError> {
    Ok(dynamic_energy(g, hw)? + hw.idle_power_w * estimate_graph_latency(g, hw)?)
}

/// Energy of a frame whose wall-clock inference time is `latency_s`.
pub fn frame_energy_at(dynamic_j: f64, latency_s: f64, hw: &HardwareProfile) -> f64 {
    dynamic_j + hw.idle_power_w * latency_s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{DType, ModuleTag, Tensor, TensorSpec};

    fn constants_only(n: usize) -> Graph {
        let mut g = Graph::default();
        for i in 0..n {
            let t = format!("c{i}");
            g.nodes.push(Node::new(
                t.clone(),
                NodeKind::Constant,
                &[],
                t.clone(),
                ModuleTag::Other,
            ));
            g.tensors
                .insert(t.clone(), TensorSpec::new(t.clone(), DType::F32, vec![4]));
            g.constants.insert(t.clone(), Tensor::zeros(vec![4]));
            g.outputs.push(t);
        }
        g
    }

    #[test]
    fn constants_cost_only_launches() {
        let hw = HardwareProfile::default();
        let g = constants_only(3);
        assert_eq!(
            estimate_graph_latency(&g, &hw).unwrap(),
            3.0 * hw.launch_overhead_s
        );
        let hw0 = HardwareProfile {
            idle_power_w: 0.0,
            ..hw
        };
        assert_eq!(estimate_frame_energy(&g, &hw0).unwrap(), 0.0);
    }

    #[test]
    fn profile_validation() {
        assert!(HardwareProfile::default().validate().is_ok());
        let bad = HardwareProfile {
            bytes_per_second: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = HardwareProfile {
            idle_power_w: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn energy_is_linear_in_flop_cost() {
        let mut g = Graph::default();
        g.nodes.push(Node::new(
            "mm",
            NodeKind::MatMul,
            &["a", "b"],
            "y",
            ModuleTag::Other,
        ));
        for t in ["a", "b", "y"] {
            g.tensors
                .insert(t.into(), TensorSpec::new(t, DType::F32, vec![8, 8]));
        }
        g.inputs = vec!["a".into(), "b".into()];
        g.outputs = vec!["y".into()];
        let hw = HardwareProfile {
            joules_per_byte: 1e-30,
            idle_power_w: 0.0,
            ..Default::default()
        };
        let hw2 = HardwareProfile {
            joules_per_flop: 2.0 * hw.joules_per_flop,
            ..hw.clone()
        };
        let (e1, e2) = (
            dynamic_energy(&g, &hw).unwrap(),
            dynamic_energy(&g, &hw2).unwrap(),
        );
        let bytes_term = node_bytes(&g, &g.nodes[0]).unwrap() as f64 * hw.joules_per_byte;
        assert!(((e2 - bytes_term) - 2.0 * (e1 - bytes_term)).abs() < 1e-18);
    }
}
