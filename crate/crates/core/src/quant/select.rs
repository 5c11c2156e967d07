use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::QuantError;
use crate::ir::{Graph, IrError, Node, NodeKind};

/// Attention products whose sequence dimension exceeds this stay in float.
pub const LONG_SEQUENCE_THRESHOLD: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExclusionReason {
    LongSeqMHA,
    GEMVDegenerate,
    UnsupportedKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub candidates: BTreeSet<String>,
    pub excluded: BTreeMap<String, ExclusionReason>,
}

const QUANTIZABLE: [NodeKind; 5] = [
    NodeKind::MatMul,
    NodeKind::Conv2d,
    NodeKind::FusedConvAdd,
    NodeKind::FusedMatMulAdd,
    NodeKind::FusedMHA,
];

fn is_scalar_constant(g: &Graph, tensor: &str) -> bool {
    g.constants.get(tensor).is_some_and(|t| t.numel() == 1)
}

/// True when `node` is a `Q·Kᵀ` or `P·V` product of an unfused attention block.
fn is_attention_matmul(
    g: &Graph,
    node: &Node,
    producers: &BTreeMap<&str, usize>,
    consumers: &BTreeMap<&str, Vec<usize>>,
) -> bool {
    if let Some(&p) = producers.get(node.inputs[0].as_str()) {
        if g.nodes[p].kind == NodeKind::Softmax {
            return true;
        }
    }
    let mut tensor = node.output();
    for _ in 0..2 {
        let Some(users) = consumers.get(tensor) else {
            return false;
        };
        if users.len() != 1 {
            return false;
        }
        let user = &g.nodes[users[0]];
        match user.kind {
            NodeKind::Softmax => return true,
            NodeKind::Scale => tensor = user.output(),
            NodeKind::Mul
                if user
                    .inputs
                    .iter()
                    .any(|t| t != tensor && is_scalar_constant(g, t)) =>
            {
                tensor = user.output()
            }
            _ => return false,
        }
    }
    false
}

fn last_two_has_unit(shape: &[usize]) -> bool {
    shape.iter().rev().take(2).any(|&d| d == 1)
}

/// Two-stage filter: long-sequence attention first, then GEMV degeneration.
pub fn select_nodes(g: &Graph) -> Result<Selection, QuantError> {
    select_nodes_with(g, LONG_SEQUENCE_THRESHOLD)
}

/// [`select_nodes`] with a custom sequence-length threshold.
pub fn select_nodes_with(
    g: &Graph,
    long_sequence_threshold: usize,
) -> Result<Selection, QuantError> {
    let producers = g.producers();
    let consumers = g.consumers();
    let mut sel = Selection::default();
    for node in &g.nodes {
        let reason = if !QUANTIZABLE.contains(&node.kind) || node.is_int8() {
            Some(ExclusionReason::UnsupportedKind)
        } else {
            let seq_of = |t: &str| -> Result<usize, IrError> {
                let shape = &g.spec(t)?.shape;
                Ok(if shape.len() >= 2 {
                    shape[shape.len() - 2]
                } else {
                    1
                })
            };
            let attention = match node.kind {
                NodeKind::FusedMHA => true,
                NodeKind::MatMul => is_attention_matmul(g, node, &producers, &consumers),
                _ => false,
            };
            if attention && seq_of(&node.inputs[0])? > long_sequence_threshold {
                Some(ExclusionReason::LongSeqMHA)
            } else if matches!(node.kind, NodeKind::MatMul | NodeKind::FusedMatMulAdd)
                && last_two_has_unit(&g.spec(node.output())?.shape)
            {
                Some(ExclusionReason::GEMVDegenerate)
            } else {
                None
            }
        };
        match reason {
            Some(r) => {
                sel.excluded.insert(node.id.clone(), r);
            }
            None => {
                sel.candidates.insert(node.id.clone());
            }
        }
    }
    Ok(sel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{DType, ModuleTag, TensorSpec};

    fn attention(seq: usize) -> Graph {
        let mut g = Graph::default();
        let tag = ModuleTag::BevEncoder;
        g.nodes
            .push(Node::new("qk", NodeKind::MatMul, &["q", "kt"], "s", tag));
        g.nodes
            .push(Node::new("sm", NodeKind::Softmax, &["s"], "p", tag));
        g.nodes
            .push(Node::new("pv", NodeKind::MatMul, &["p", "v"], "o", tag));
        let d = 8;
        for (t, shape) in [
            ("q", vec![1, seq, d]),
            ("kt", vec![1, d, seq]),
            ("v", vec![1, seq, d]),
            ("s", vec![1, seq, seq]),
            ("p", vec![1, seq, seq]),
            ("o", vec![1, seq, d]),
        ] {
            g.tensors
                .insert(t.into(), TensorSpec::new(t, DType::F32, shape));
        }
        g.inputs = vec!["q".into(), "kt".into(), "v".into()];
        g.outputs = vec!["o".into()];
        g
    }

    #[test]
    fn sequence_threshold_is_strict() {
        for (seq, excluded) in [(256, false), (512, false), (513, true), (600, true)] {
            let sel = select_nodes(&attention(seq)).unwrap();
            for id in ["qk", "pv"] {
                assert_eq!(
                    sel.excluded.get(id) == Some(&ExclusionReason::LongSeqMHA),
                    excluded,
                    "seq {seq} {id}"
                );
            }
            assert_eq!(sel.excluded["sm"], ExclusionReason::UnsupportedKind);
        }
    }

    #[test]
    fn gemv_output_is_excluded() {
        let mut g = Graph::default();
        g.nodes.push(Node::new(
            "mm",
            NodeKind::MatMul,
            &["a", "b"],
            "y",
            ModuleTag::Planner,
        ));
        for (t, shape) in [
            ("a", vec![1, 1, 64]),
            ("b", vec![64, 256]),
            ("y", vec![1, 1, 256]),
        ] {
            g.tensors
                .insert(t.into(), TensorSpec::new(t, DType::F32, shape));
        }
        g.inputs = vec!["a".into(), "b".into()];
        g.outputs = vec!["y".into()];
        let sel = select_nodes(&g).unwrap();
        assert_eq!(sel.excluded["mm"], ExclusionReason::GEMVDegenerate);
        assert!(sel.candidates.is_empty());
    }
}
