use std::collections::{BTreeMap, BTreeSet};

use super::{finish, remove_nodes, rename_uses, PassError, PassReport, Rewrite};
use crate::ir::topo::topo_indices;
use crate::ir::{Graph, NodeKind};

fn same_node(g: &Graph, a: usize, b: usize) -> bool {
    let (x, y) = (&g.nodes[a], &g.nodes[b]);
    if x.kind != y.kind || x.inputs != y.inputs || x.attrs != y.attrs {
        return false;
    }
    if x.kind == NodeKind::Constant {
        return g.constants.get(x.output()) == g.constants.get(y.output())
            && g.tensors.get(x.output()).map(|s| s.dtype)
                == g.tensors.get(y.output()).map(|s| s.dtype);
    }
    true
}

/// Merge duplicate nodes, then remove nodes that cannot reach a graph output.
pub fn eliminate_dead_nodes(g: &Graph) -> Result<(Graph, PassReport), PassError> {
    let mut report = PassReport::new("eliminate_dead_nodes", g.nodes.len());
    let mut out = g.clone();
    let order = topo_indices(g)?;

    // Duplicates: visiting in topological order means inputs are already
    // canonical when a node is compared.
    let mut seen: BTreeMap<(NodeKind, Vec<String>), Vec<usize>> = BTreeMap::new();
    let mut merged = BTreeSet::new();
    for &i in &order {
        let key = (out.nodes[i].kind, out.nodes[i].inputs.clone());
        let bucket = seen.entry(key).or_default();
        let dup_of = bucket.iter().copied().find(|&j| same_node(&out, j, i));
        match dup_of {
            Some(j) if !out.is_output(out.nodes[i].output()) => {
                let (from, to) = (
                    out.nodes[i].output().to_string(),
                    out.nodes[j].output().to_string(),
                );
                rename_uses(&mut out, &from, &to);
                report.rewrites.push(Rewrite::new(
                    "duplicate",
                    vec![out.nodes[j].id.clone(), out.nodes[i].id.clone()],
                    1,
                ));
                merged.insert(out.nodes[i].id.clone());
            }
            _ => bucket.push(i),
        }
    }

    // Liveness: walk back from the graph outputs.
    let producers = out.producers();
    let mut live = BTreeSet::new();
    let mut stack: Vec<&str> = out.outputs.iter().map(String::as_str).collect();
    while let Some(t) = stack.pop() {
        if let Some(&p) = producers.get(t) {
            let node = &out.nodes[p];
            if merged.contains(&node.id) || !live.insert(p) {
                continue;
            }
            stack.extend(node.inputs.iter().map(String::as_str));
        }
    }
    let mut removed = merged;
    for (i, n) in out.nodes.iter().enumerate() {
        if !live.contains(&i) && !removed.contains(&n.id) {
            report
                .rewrites
                .push(Rewrite::new("dead", vec![n.id.clone()], 0));
            removed.insert(n.id.clone());
        }
    }
    remove_nodes(&mut out, &removed);
    finish(out, report)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::ir::{interpret, DType, ModuleTag, Node, Tensor, TensorSpec};

    fn base() -> Graph {
        let mut g = Graph::default();
        for t in ["a", "b", "m1", "m2", "y"] {
            g.tensors
                .insert(t.into(), TensorSpec::new(t, DType::F32, vec![3, 3]));
        }
        g.inputs = vec!["a".into(), "b".into()];
        g.outputs = vec!["y".into()];
        g
    }

    #[test]
    fn duplicate_matmuls_are_merged() {
        let mut g = base();
        g.nodes.push(Node::new(
            "mm1",
            NodeKind::MatMul,
            &["a", "b"],
            "m1",
            ModuleTag::Other,
        ));
        g.nodes.push(Node::new(
            "mm2",
            NodeKind::MatMul,
            &["a", "b"],
            "m2",
            ModuleTag::Other,
        ));
        g.nodes.push(Node::new(
            "add",
            NodeKind::Add,
            &["m1", "m2"],
            "y",
            ModuleTag::Other,
        ));
        let (out, report) = eliminate_dead_nodes(&g).unwrap();
        assert_eq!(out.nodes.len(), 2);
        assert_eq!(out.node("add").unwrap().inputs, vec!["m1", "m1"]);
        assert_eq!(report.rewrites.len(), 1);
        let a = Tensor::new(vec![3, 3], (0..9).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let b = Tensor::new(vec![3, 3], (0..9).map(|v| 1.0 - v as f64 * 0.2).collect()).unwrap();
        let bind = BTreeMap::from([("a".to_string(), a), ("b".to_string(), b)]);
        assert_eq!(
            interpret(&g, &bind).unwrap(),
            interpret(&out, &bind).unwrap()
        );
    }

    #[test]
    fn unconnected_branch_is_removed() {
        let mut g = base();
        g.nodes.push(Node::new(
            "mm",
            NodeKind::MatMul,
            &["a", "b"],
            "y",
            ModuleTag::Other,
        ));
        g.nodes.push(Node::new(
            "r",
            NodeKind::Relu,
            &["a"],
            "m1",
            ModuleTag::Other,
        ));
        let (out, report) = eliminate_dead_nodes(&g).unwrap();
        assert!(out.node("r").is_none());
        assert!(!out.tensors.contains_key("m1"));
        assert_eq!(report.rewrites[0].pattern, "dead");
    }

    #[test]
    fn live_graph_is_unchanged() {
        let mut g = base();
        g.nodes.push(Node::new(
            "mm",
            NodeKind::MatMul,
            &["a", "b"],
            "m1",
            ModuleTag::Other,
        ));
        g.nodes.push(Node::new(
            "r",
            NodeKind::Relu,
            &["m1"],
            "y",
            ModuleTag::Other,
        ));
        g.tensors.remove("m2");
        let (out, report) = eliminate_dead_nodes(&g).unwrap();
        assert_eq!(out, g);
        assert!(report.rewrites.is_empty());
    }
}
