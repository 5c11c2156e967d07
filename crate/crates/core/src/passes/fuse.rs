use std::collections::BTreeSet;

use super::{finish, PassError, PassReport, Rewrite};
use crate::ir::tensor::broadcast_shapes;
use crate::ir::topo::topo_indices;
use crate::ir::{Graph, Node, NodeKind};

/// True when `tensor` is consumed by exactly one node, exactly once, and is
/// not observable as a graph output.
pub(crate) fn is_private(g: &Graph, tensor: &str) -> bool {
    if g.is_output(tensor) {
        return false;
    }
    let uses: usize = g
        .nodes
        .iter()
        .map(|n| n.inputs.iter().filter(|t| *t == tensor).count())
        .sum();
    uses == 1
}

/// `Conv2d -> Add` becomes `FusedConvAdd`, `MatMul -> Add` becomes
/// `FusedMatMulAdd`. Products of a softmax are left for attention fusion.
pub fn fuse_basic(g: &Graph) -> Result<(Graph, PassReport), PassError> {
    let mut report = PassReport::new("fuse_basic", g.nodes.len());
    let producers = g.producers();
    // Indices of conv/matmul nodes absorbed into a fused node.
    let mut consumed = BTreeSet::new();
    let mut replacements: Vec<(usize, Node)> = Vec::new();

    for i in topo_indices(g)? {
        let add = &g.nodes[i];
        if add.kind != NodeKind::Add || add.is_int8() {
            continue;
        }
        for side in 0..2 {
            let (lhs, addend) = (&add.inputs[side], &add.inputs[1 - side]);
            let Some(&p) = producers.get(lhs.as_str()) else {
                continue;
            };
            let prod = &g.nodes[p];
            let fused_kind = match prod.kind {
                NodeKind::Conv2d => NodeKind::FusedConvAdd,
                NodeKind::MatMul => NodeKind::FusedMatMulAdd,
                _ => continue,
            };
            if prod.is_int8() || consumed.contains(&p) || !is_private(g, lhs) {
                continue;
            }
            if prod.kind == NodeKind::MatMul {
                let from_softmax = producers
                    .get(prod.inputs[0].as_str())
                    .is_some_and(|&s| g.nodes[s].kind == NodeKind::Softmax);
                if from_softmax {
                    continue;
                }
            }
            let acc_shape = &g.spec(lhs)?.shape;
            if broadcast_shapes(acc_shape, &g.spec(addend)?.shape).as_ref() != Some(acc_shape) {
                continue;
            }
            let mut fused = prod.clone();
            fused.id = format!("{}__{}", prod.id, add.id);
            fused.kind = fused_kind;
            fused.inputs.push(addend.clone());
            fused.outputs = add.outputs.clone();
            report.rewrites.push(Rewrite::new(
                if fused_kind == NodeKind::FusedConvAdd {
                    "conv_add"
                } else {
                    "matmul_add"
                },
                vec![prod.id.clone(), add.id.clone()],
                1,
            ));
            consumed.insert(p);
            replacements.push((i, fused));
            break;
        }
    }

    let mut out = g.clone();
    for (i, fused) in replacements {
        out.nodes[i] = fused;
    }
    let mut idx = 0;
    out.nodes.retain(|_| {
        idx += 1;
        !consumed.contains(&(idx - 1))
    });
    out.prune_unreferenced_tensors();
    finish(out, report)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::ir::{interpret, DType, ModuleTag, Tensor, TensorSpec};

    fn chain(out_is_graph_output: bool) -> Graph {
        let mut g = Graph::default();
        g.nodes.push(Node::new(
            "mm",
            NodeKind::MatMul,
            &["a", "b"],
            "m",
            ModuleTag::Other,
        ));
        g.nodes.push(Node::new(
            "add",
            NodeKind::Add,
            &["m", "c"],
            "y",
            ModuleTag::Other,
        ));
        for (t, s) in [
            ("a", vec![8, 8]),
            ("b", vec![8, 8]),
            ("c", vec![8]),
            ("m", vec![8, 8]),
            ("y", vec![8, 8]),
        ] {
            g.tensors
                .insert(t.into(), TensorSpec::new(t, DType::F32, s));
        }
        g.inputs = vec!["a".into(), "b".into(), "c".into()];
        g.outputs = vec!["y".into()];
        if out_is_graph_output {
            g.outputs.push("m".into());
        }
        g
    }

    #[test]
    fn matmul_add_fuses_and_matches() {
        let g = chain(false);
        let (out, report) = fuse_basic(&g).unwrap();
        assert_eq!(out.nodes.len(), 1);
        assert_eq!(out.nodes[0].kind, NodeKind::FusedMatMulAdd);
        assert_eq!(out.nodes[0].id, "mm__add");
        assert_eq!(report.rewrites[0].matched, vec!["mm", "add"]);
        let bind: BTreeMap<String, Tensor> = [("a", 64), ("b", 64), ("c", 8)]
            .into_iter()
            .enumerate()
            .map(|(k, (name, n))| {
                let shape = if n == 8 { vec![8] } else { vec![8, 8] };
                let data = (0..n)
                    .map(|i| ((i * 7 + k * 3) % 11) as f64 / 5.0 - 1.0)
                    .collect();
                (name.to_string(), Tensor::new(shape, data).unwrap())
            })
            .collect();
        let a = interpret(&g, &bind).unwrap();
        let b = interpret(&out, &bind).unwrap();
        assert!(a["y"].max_abs_diff(&b["y"]) <= 1e-6);
    }

    #[test]
    fn observable_intermediate_blocks_fusion() {
        let g = chain(true);
        let (out, report) = fuse_basic(&g).unwrap();
        assert_eq!(out, g);
        assert!(report.rewrites.is_empty());
    }
}
