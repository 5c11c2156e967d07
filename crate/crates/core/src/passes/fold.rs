use std::collections::BTreeSet;

use super::{finish, remove_nodes, PassError, PassReport, Rewrite};
use crate::ir::interp::eval_node;
use crate::ir::topo::topo_indices;
use crate::ir::{Graph, Node, NodeKind, Tensor};

/// Replace every node whose inputs are all constant with a `Constant` node
/// holding its value, then drop `Constant` nodes this left without consumers.
pub fn fold_constants(g: &Graph) -> Result<(Graph, PassReport), PassError> {
    let mut report = PassReport::new("fold_constants", g.nodes.len());
    let mut out = g.clone();
    let mut orphan_candidates = BTreeSet::new();
    let producers = g.producers();

    for i in topo_indices(g)? {
        let node = &out.nodes[i];
        if node.kind == NodeKind::Constant
            || node.inputs.iter().any(|t| !out.constants.contains_key(t))
        {
            continue;
        }
        let value = {
            let args: Vec<&Tensor> = node.inputs.iter().map(|t| &out.constants[t]).collect();
            eval_node(node, &args, None)?
        };
        for t in &node.inputs {
            if let Some(&p) = producers.get(t.as_str()) {
                orphan_candidates.insert(g.nodes[p].id.clone());
            }
        }
        let folded = Node::new(
            node.id.clone(),
            NodeKind::Constant,
            &[],
            node.output(),
            node.tag,
        );
        report
            .rewrites
            .push(Rewrite::new("constant_subgraph", vec![node.id.clone()], 1));
        out.constants.insert(node.output().to_string(), value);
        out.nodes[i] = folded;
    }

    let used: BTreeSet<&str> = out
        .nodes
        .iter()
        .flat_map(|n| n.inputs.iter().map(String::as_str))
        .collect();
    let orphans: BTreeSet<String> = out
        .nodes
        .iter()
        .filter(|n| {
            n.kind == NodeKind::Constant
                && orphan_candidates.contains(&n.id)
                && !used.contains(n.output())
                && !out.is_output(n.output())
        })
        .map(|n| n.id.clone())
        .collect();
    for id in &orphans {
        report
            .rewrites
            .push(Rewrite::new("orphaned_constant", vec![id.clone()], 0));
    }
    remove_nodes(&mut out, &orphans);
    finish(out, report)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::ir::{interpret, DType, ModuleTag, TensorSpec};

    fn declare(g: &mut Graph, name: &str, shape: Vec<usize>) {
        g.tensors
            .insert(name.into(), TensorSpec::new(name, DType::F32, shape));
    }

    fn constant(g: &mut Graph, id: &str, out: &str, v: f64) {
        g.nodes.push(Node::new(
            id,
            NodeKind::Constant,
            &[],
            out,
            ModuleTag::Other,
        ));
        declare(g, out, vec![1]);
        g.constants.insert(out.into(), Tensor::scalar(v));
    }

    #[test]
    fn add_of_constants_becomes_one_constant() {
        let mut g = Graph::default();
        constant(&mut g, "c2", "two", 2.0);
        constant(&mut g, "c3", "three", 3.0);
        g.nodes.push(Node::new(
            "add",
            NodeKind::Add,
            &["two", "three"],
            "y",
            ModuleTag::Other,
        ));
        declare(&mut g, "y", vec![1]);
        g.outputs = vec!["y".into()];
        let (out, report) = fold_constants(&g).unwrap();
        assert_eq!(out.nodes.len(), 1);
        assert_eq!(out.nodes[0].kind, NodeKind::Constant);
        assert_eq!(out.constants["y"].data, vec![5.0]);
        assert_eq!(report.nodes_after, 1);
    }

    #[test]
    fn mixed_chain_keeps_live_add() {
        let mut g = Graph::default();
        constant(&mut g, "c2", "two", 2.0);
        constant(&mut g, "c3", "three", 3.0);
        g.nodes.push(Node::new(
            "mul",
            NodeKind::Mul,
            &["two", "three"],
            "six",
            ModuleTag::Other,
        ));
        g.nodes.push(Node::new(
            "add",
            NodeKind::Add,
            &["six", "x"],
            "y",
            ModuleTag::Other,
        ));
        declare(&mut g, "six", vec![1]);
        declare(&mut g, "x", vec![3]);
        declare(&mut g, "y", vec![3]);
        g.inputs = vec!["x".into()];
        g.outputs = vec!["y".into()];
        let (out, _) = fold_constants(&g).unwrap();
        assert_eq!(out.nodes.len(), 2);
        assert!(out.node("add").is_some());
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x =
                Tensor::new(vec![3], (0..3).map(|_| rng.gen_range(-4.0..4.0)).collect()).unwrap();
            let bind = BTreeMap::from([("x".to_string(), x)]);
            let a = interpret(&g, &bind).unwrap();
            let b = interpret(&out, &bind).unwrap();
            assert!(a["y"].max_abs_diff(&b["y"]) <= 1e-12);
        }
    }

    #[test]
    fn nothing_to_fold_is_unchanged() {
        let mut g = Graph::default();
        g.nodes.push(Node::new(
            "r",
            NodeKind::Relu,
            &["x"],
            "y",
            ModuleTag::Other,
        ));
        declare(&mut g, "x", vec![2]);
        declare(&mut g, "y", vec![2]);
        g.inputs = vec!["x".into()];
        g.outputs = vec!["y".into()];
        let (out, report) = fold_constants(&g).unwrap();
        assert_eq!(out, g);
        assert!(report.rewrites.is_empty());
    }
}
