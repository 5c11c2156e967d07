//! Attention-pattern fusion.
//!
//! Multi-head attention: `MatMul(Q, Kᵀ) -> Scale -> Softmax -> MatMul(·, V)`,
//! where the scale step may be a `Scale` node, a `Mul` by a one-element
//! constant, or absent. A last-two-axes `Transpose` producing `Kᵀ` and
//! three projection `MatMul`s producing Q, K and V are absorbed when private.
//!
//! Deformable attention: an `Add` tree whose leaves are
//! `Mul(GridSample(value, grid), weight)`, with an optional projection
//! `MatMul` producing every grid.

use std::collections::{BTreeMap, BTreeSet};

use super::fuse::is_private;
use super::{finish, PassError, PassReport, Rewrite};
use crate::ir::shape::{is_last_two_swap, resolve_axis, resolve_perm};
use crate::ir::topo::topo_indices;
use crate::ir::{attr, AttrValue, Graph, Node, NodeKind};

struct Match {
    pattern: &'static str,
    absorbed: Vec<usize>,
    fused: Node,
}

fn producer<'g>(
    g: &'g Graph,
    producers: &BTreeMap<&str, usize>,
    t: &str,
) -> Option<(usize, &'g Node)> {
    producers
        .get(t)
        .map(|&i| (i, &g.nodes[i]))
        .filter(|(_, n)| !n.is_int8())
}

/// Producer of `t` when `t` is private to its single consumer.
fn private_producer<'g>(
    g: &'g Graph,
    producers: &BTreeMap<&str, usize>,
    t: &str,
) -> Option<(usize, &'g Node)> {
    if is_private(g, t) {
        producer(g, producers, t)
    } else {
        None
    }
}

fn scalar_constant(g: &Graph, t: &str) -> Option<f64> {
    g.constants
        .get(t)
        .filter(|c| c.numel() == 1)
        .map(|c| c.data[0])
}

fn match_mha(
    g: &Graph,
    producers: &BTreeMap<&str, usize>,
    sm_idx: usize,
) -> Result<Option<Match>, PassError> {
    let sm = &g.nodes[sm_idx];
    if sm.kind != NodeKind::Softmax || sm.is_int8() {
        return Ok(None);
    }
    let rank = g.spec(sm.output())?.shape.len();
    if resolve_axis(sm, rank)? != rank - 1 || !is_private(g, sm.output()) {
        return Ok(None);
    }
    let Some(pv_idx) = g
        .nodes
        .iter()
        .position(|n| n.inputs.iter().any(|t| t == sm.output()))
    else {
        return Ok(None);
    };
    let pv = &g.nodes[pv_idx];
    if pv.kind != NodeKind::MatMul || pv.is_int8() || pv.inputs[0] != sm.output() {
        return Ok(None);
    }

    let mut absorbed = vec![sm_idx, pv_idx];
    let Some((mut qk_idx, mut qk)) = private_producer(g, producers, &sm.inputs[0]) else {
        return Ok(None);
    };
    let mut scale = 1.0;
    match qk.kind {
        NodeKind::MatMul => {}
        NodeKind::Scale => {
            scale = qk.attr_float(attr::FACTOR).unwrap_or(1.0);
            absorbed.push(qk_idx);
            let Some(next) = private_producer(g, producers, &qk.inputs[0]) else {
                return Ok(None);
            };
            (qk_idx, qk) = next;
        }
        NodeKind::Mul => {
            let mul_idx = qk_idx;
            let mul = qk;
            let Some(side) = (0..2).find(|&s| scalar_constant(g, &mul.inputs[1 - s]).is_some())
            else {
                return Ok(None);
            };
            let (scores, factor) = (&mul.inputs[side], &mul.inputs[1 - side]);
            if g.spec(scores)?.shape != g.spec(mul.output())?.shape || scores == factor {
                return Ok(None);
            }
            scale = scalar_constant(g, factor).expect("checked above");
            absorbed.push(mul_idx);
            if let Some((c_idx, c)) = private_producer(g, producers, factor) {
                if c.kind == NodeKind::Constant {
                    absorbed.push(c_idx);
                }
            }
            let Some(next) = private_producer(g, producers, scores) else {
                return Ok(None);
            };
            (qk_idx, qk) = next;
        }
        _ => return Ok(None),
    }
    if qk.kind != NodeKind::MatMul {
        return Ok(None);
    }
    absorbed.push(qk_idx);

    let (q, mut k, v) = (
        qk.inputs[0].clone(),
        qk.inputs[1].clone(),
        pv.inputs[1].clone(),
    );
    let mut transpose_k = false;
    if let Some((t_idx, t)) = private_producer(g, producers, &k) {
        if t.kind == NodeKind::Transpose
            && is_last_two_swap(&resolve_perm(t, g.spec(&t.inputs[0])?.shape.len())?)
        {
            absorbed.push(t_idx);
            transpose_k = true;
            k = t.inputs[0].clone();
        }
    }

    let projections: Vec<_> = [&q, &k, &v]
        .iter()
        .map(|t| private_producer(g, producers, t).filter(|(_, n)| n.kind == NodeKind::MatMul))
        .collect();
    let distinct = q != k && k != v && q != v;
    let inputs: Vec<String> = if distinct && projections.iter().all(Option::is_some) {
        let mut ins = Vec::with_capacity(6);
        for (idx, node) in projections.into_iter().flatten() {
            absorbed.push(idx);
            ins.extend(node.inputs.iter().cloned());
        }
        ins
    } else {
        vec![q, k, v]
    };
    let projected = inputs.len() == 6;

    let mut fused = Node::new(
        format!("{}__{}", qk.id, pv.id),
        NodeKind::FusedMHA,
        &[],
        pv.output(),
        pv.tag,
    )
    .with_attr(attr::SCALE, AttrValue::Float(scale))
    .with_attr(attr::TRANSPOSE_K, AttrValue::Int(transpose_k as i64))
    .with_attr(attr::PROJECTED, AttrValue::Int(projected as i64));
    fused.inputs = inputs;
    Ok(Some(Match {
        pattern: "multi_head_attention",
        absorbed,
        fused,
    }))
}

struct Leaf {
    mul: usize,
    sample: usize,
    projection: Option<usize>,
}

/// Collect the leaves of a private `Add` tree rooted at `t`, left to right.
fn collect_leaves(
    g: &Graph,
    producers: &BTreeMap<&str, usize>,
    t: &str,
    adds: &mut Vec<usize>,
    leaves: &mut Vec<Leaf>,
) -> bool {
    let Some((idx, node)) = private_producer(g, producers, t) else {
        return false;
    };
    match node.kind {
        NodeKind::Add => {
            adds.push(idx);
            node.inputs[0] != node.inputs[1]
                && collect_leaves(g, producers, &node.inputs[0], adds, leaves)
                && collect_leaves(g, producers, &node.inputs[1], adds, leaves)
        }
        NodeKind::Mul => match leaf_at(g, producers, idx) {
            Some(leaf) => {
                leaves.push(leaf);
                true
            }
            None => false,
        },
        _ => false,
    }
}

fn leaf_at(g: &Graph, producers: &BTreeMap<&str, usize>, mul_idx: usize) -> Option<Leaf> {
    let mul = &g.nodes[mul_idx];
    let side = (0..2).find(|&s| {
        private_producer(g, producers, &mul.inputs[s])
            .is_some_and(|(_, n)| n.kind == NodeKind::GridSample)
    })?;
    if mul.inputs[0] == mul.inputs[1] {
        return None;
    }
    let (sample, gs) = private_producer(g, producers, &mul.inputs[side])?;
    let projection = private_producer(g, producers, &gs.inputs[1])
        .filter(|(_, n)| n.kind == NodeKind::MatMul && gs.inputs[0] != gs.inputs[1])
        .map(|(i, _)| i);
    Some(Leaf {
        mul: mul_idx,
        sample,
        projection,
    })
}

fn match_msda(g: &Graph, producers: &BTreeMap<&str, usize>, root_idx: usize) -> Option<Match> {
    let root = &g.nodes[root_idx];
    if root.kind != NodeKind::Add || root.is_int8() || root.inputs[0] == root.inputs[1] {
        return None;
    }
    let (mut adds, mut leaves) = (vec![root_idx], Vec::new());
    for t in &root.inputs {
        if !collect_leaves(g, producers, t, &mut adds, &mut leaves) {
            return None;
        }
    }
    if leaves.len() < 2 {
        return None;
    }
    let projected = leaves.iter().all(|l| l.projection.is_some());
    let mut absorbed = adds;
    let mut inputs = Vec::new();
    for leaf in &leaves {
        let (mul, gs) = (&g.nodes[leaf.mul], &g.nodes[leaf.sample]);
        let weight = mul
            .inputs
            .iter()
            .find(|t| **t != gs.output())
            .expect("distinct operands")
            .clone();
        inputs.push(gs.inputs[0].clone());
        match leaf.projection.filter(|_| projected) {
            Some(p) => {
                inputs.extend(g.nodes[p].inputs.iter().cloned());
                absorbed.push(p);
            }
            None => inputs.push(gs.inputs[1].clone()),
        }
        inputs.push(weight);
        absorbed.extend([leaf.mul, leaf.sample]);
    }
    let mut fused = Node::new(
        format!("{}__msda", root.id),
        NodeKind::FusedMSDA,
        &[],
        root.output(),
        root.tag,
    )
    .with_attr(attr::BRANCHES, AttrValue::Int(leaves.len() as i64))
    .with_attr(attr::PROJECTED, AttrValue::Int(projected as i64));
    fused.inputs = inputs;
    Some(Match {
        pattern: "deformable_attention",
        absorbed,
        fused,
    })
}

fn apply(g: &mut Graph, m: Match, report: &mut PassReport) {
    let absorbed: BTreeSet<usize> = m.absorbed.into_iter().collect();
    let ids: Vec<String> = absorbed.iter().map(|&i| g.nodes[i].id.clone()).collect();
    report.rewrites.push(Rewrite::new(m.pattern, ids, 1));
    let mut idx = 0;
    g.nodes.retain(|_| {
        idx += 1;
        !absorbed.contains(&(idx - 1))
    });
    g.nodes.push(m.fused);
    g.prune_unreferenced_tensors();
}

/// Fuse multi-head and deformable attention subgraphs.
pub fn fuse_attention(g: &Graph) -> Result<(Graph, PassReport), PassError> {
    let mut report = PassReport::new("fuse_attention", g.nodes.len());
    let mut out = g.clone();
    'mha: loop {
        let producers = out.producers();
        for i in topo_indices(&out)? {
            if let Some(m) = match_mha(&out, &producers, i)? {
                apply(&mut out, m, &mut report);
                continue 'mha;
            }
        }
        break;
    }
    'msda: loop {
        let producers = out.producers();
        for &i in topo_indices(&out)?.iter().rev() {
            if let Some(m) = match_msda(&out, &producers, i) {
                apply(&mut out, m, &mut report);
                continue 'msda;
            }
        }
        break;
    }
    finish(out, report)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::ir::{interpret, DType, ModuleTag, Tensor, TensorSpec};

    fn declare(g: &mut Graph, t: &str, shape: &[usize]) {
        g.tensors
            .insert(t.into(), TensorSpec::new(t, DType::F32, shape.to_vec()));
    }

    fn attention(seq: usize, d: usize) -> Graph {
        let mut g = Graph::default();
        let tag = ModuleTag::BevEncoder;
        g.nodes
            .push(Node::new("kt", NodeKind::Transpose, &["k"], "k_t", tag));
        g.nodes
            .push(Node::new("qk", NodeKind::MatMul, &["q", "k_t"], "s", tag));
        g.nodes.push(
            Node::new("sc", NodeKind::Scale, &["s"], "s2", tag)
                .with_attr(attr::FACTOR, AttrValue::Float(1.0 / (d as f64).sqrt())),
        );
        g.nodes
            .push(Node::new("sm", NodeKind::Softmax, &["s2"], "p", tag));
        g.nodes
            .push(Node::new("pv", NodeKind::MatMul, &["p", "v"], "o", tag));
        for t in ["q", "k", "v", "o"] {
            declare(&mut g, t, &[1, seq, d]);
        }
        declare(&mut g, "k_t", &[1, d, seq]);
        for t in ["s", "s2", "p"] {
            declare(&mut g, t, &[1, seq, seq]);
        }
        g.inputs = vec!["q".into(), "k".into(), "v".into()];
        g.outputs = vec!["o".into()];
        g
    }

    fn random_inputs(g: &Graph, seed: u64) -> BTreeMap<String, Tensor> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        g.inputs
            .iter()
            .map(|n| {
                let shape = g.tensors[n].shape.clone();
                let len = shape.iter().product();
                (
                    n.clone(),
                    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .unwrap(),
                )
            })
            .collect()
    }

    fn rel_close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1e-6 / tol))
    }

    #[test]
    fn canonical_attention_fuses_to_one_node() {
        let g = attention(16, 8);
        let (out, report) = fuse_attention(&g).unwrap();
        assert_eq!(out.nodes.len(), 1);
        let n = &out.nodes[0];
        assert_eq!(n.kind, NodeKind::FusedMHA);
        assert!(n.flag(attr::TRANSPOSE_K));
        assert_eq!(report.rewrites[0].matched.len(), 5);
    }

    #[test]
    fn fused_attention_matches_reference() {
        let g = attention(32, 16);
        let (out, _) = fuse_attention(&g).unwrap();
        for seed in 0..3 {
            let bind = random_inputs(&g, seed);
            let a = interpret(&g, &bind).unwrap();
            let b = interpret(&out, &bind).unwrap();
            assert!(rel_close(&a["o"], &b["o"], 1e-5));
        }
    }

    #[test]
    fn tapped_softmax_blocks_fusion() {
        let mut g = attention(16, 8);
        g.outputs.push("p".into());
        let (out, report) = fuse_attention(&g).unwrap();
        assert_eq!(out, g);
        assert!(report.rewrites.is_empty());
    }

    #[test]
    fn projections_are_absorbed() {
        let mut g = attention(8, 4);
        let tag = ModuleTag::BevEncoder;
        for (x, w, t) in [("xq", "wq", "q"), ("xk", "wk", "k"), ("xv", "wv", "v")] {
            g.nodes.push(Node::new(
                format!("proj_{t}"),
                NodeKind::MatMul,
                &[x, w],
                t,
                tag,
            ));
            declare(&mut g, x, &[1, 8, 4]);
            declare(&mut g, w, &[4, 4]);
        }
        g.inputs = ["xq", "wq", "xk", "wk", "xv", "wv"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (out, _) = fuse_attention(&g).unwrap();
        assert_eq!(out.nodes.len(), 1);
        assert!(out.nodes[0].flag(attr::PROJECTED));
        let bind = random_inputs(&g, 11);
        assert!(rel_close(
            &interpret(&g, &bind).unwrap()["o"],
            &interpret(&out, &bind).unwrap()["o"],
            1e-5
        ));
    }

    #[test]
    fn deformable_attention_fuses() {
        let mut g = Graph::default();
        let tag = ModuleTag::Seg;
        let mut sum = String::new();
        for b in 0..3 {
            let (v, grid, w, s, m) = (
                format!("v{b}"),
                format!("g{b}"),
                format!("w{b}"),
                format!("s{b}"),
                format!("m{b}"),
            );
            g.nodes.push(Node::new(
                format!("gs{b}"),
                NodeKind::GridSample,
                &[&v, &grid],
                &s,
                tag,
            ));
            g.nodes.push(Node::new(
                format!("mul{b}"),
                NodeKind::Mul,
                &[&s, &w],
                &m,
                tag,
            ));
            declare(&mut g, &v, &[1, 2, 4, 4]);
            declare(&mut g, &grid, &[1, 3, 3, 2]);
            declare(&mut g, &w, &[1, 1, 3, 3]);
            declare(&mut g, &s, &[1, 2, 3, 3]);
            declare(&mut g, &m, &[1, 2, 3, 3]);
            g.inputs.extend([v, grid, w]);
            if b == 0 {
                sum = m;
            } else {
                let o = format!("acc{b}");
                g.nodes.push(Node::new(
                    format!("add{b}"),
                    NodeKind::Add,
                    &[&sum, &m],
                    &o,
                    tag,
                ));
                declare(&mut g, &o, &[1, 2, 3, 3]);
                sum = o;
            }
        }
        g.outputs = vec![sum];
        let (out, report) = fuse_attention(&g).unwrap();
        assert_eq!(out.nodes.len(), 1);
        assert_eq!(out.nodes[0].attr_int(attr::BRANCHES), Some(3));
        assert_eq!(report.accounted_nodes_after(), 1);
        let bind = random_inputs(&g, 2);
        assert_eq!(
            interpret(&g, &bind).unwrap(),
            interpret(&out, &bind).unwrap()
        );
    }
}
