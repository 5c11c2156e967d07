use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{finish, PassError, PassReport, Rewrite};
use crate::ir::topo::topo_indices;
use crate::ir::{Graph, ModuleTag};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PruneSpec {
    pub remove: BTreeSet<ModuleTag>,
    #[serde(default = "default_rewire")]
    pub rewire_to_planner: bool,
}

fn default_rewire() -> bool {
    true
}

impl PruneSpec {
    pub fn new(remove: impl IntoIterator<Item = ModuleTag>) -> Self {
        Self {
            remove: remove.into_iter().collect(),
            rewire_to_planner: true,
        }
    }

    pub fn check(&self) -> Result<(), PassError> {
        for tag in [
            ModuleTag::Backbone,
            ModuleTag::BevEncoder,
            ModuleTag::Planner,
        ] {
            if self.remove.contains(&tag) {
                return Err(PassError::ProtectedModule(tag));
            }
        }
        Ok(())
    }
}

/// Delete every node tagged with a removed module. Surviving consumers of a
/// deleted tensor are rewired to the closest shape-compatible tensor that
/// fed the deleted region; nodes left without a path to an output are dropped.
pub fn prune_modules(g: &Graph, spec: &PruneSpec) -> Result<(Graph, PassReport), PassError> {
    spec.check()?;
    let mut report = PassReport::new("prune_modules", g.nodes.len());
    if spec.remove.is_empty() {
        return finish(g.clone(), report);
    }
    let order = topo_indices(g)?;
    let position: BTreeMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(pos, &i)| (g.nodes[i].output(), pos + 1))
        .collect();
    let producers = g.producers();
    let removed: BTreeSet<usize> = (0..g.nodes.len())
        .filter(|&i| spec.remove.contains(&g.nodes[i].tag))
        .collect();

    // Surviving tensors feeding the deleted region upstream of `t`.
    let frontier = |t: &str| -> BTreeSet<String> {
        let mut found = BTreeSet::new();
        let mut seen = BTreeSet::new();
        let mut stack = vec![t.to_string()];
        while let Some(cur) = stack.pop() {
            if !seen.insert(cur.clone()) {
                continue;
            }
            match producers.get(cur.as_str()) {
                Some(&p) if removed.contains(&p) => stack.extend(g.nodes[p].inputs.iter().cloned()),
                _ if cur != t && !g.constants.contains_key(&cur) => {
                    found.insert(cur);
                }
                _ => {}
            }
        }
        found
    };

    let mut out = g.clone();
    for (i, node) in g.nodes.iter().enumerate() {
        if removed.contains(&i) {
            continue;
        }
        for (slot, t) in node.inputs.iter().enumerate() {
            let Some(&p) = producers.get(t.as_str()) else {
                continue;
            };
            if !removed.contains(&p) {
                continue;
            }
            let shape = &g.spec(t)?.shape;
            let replacement = spec
                .rewire_to_planner
                .then(|| {
                    frontier(t)
                        .into_iter()
                        .filter(|c| g.tensors.get(c).is_some_and(|s| &s.shape == shape))
                        .max_by(|a, b| {
                            let (pa, pb) = (
                                position.get(a.as_str()).unwrap_or(&0),
                                position.get(b.as_str()).unwrap_or(&0),
                            );
                            pa.cmp(pb).then_with(|| b.cmp(a))
                        })
                })
                .flatten()
                .ok_or_else(|| PassError::Infeasible {
                    node: node.id.clone(),
                    tensor: t.clone(),
                    shape: shape.clone(),
                })?;
            out.nodes[i].inputs[slot] = replacement;
        }
    }

    let removed_outputs: BTreeSet<&str> = removed.iter().map(|&i| g.nodes[i].output()).collect();
    out.outputs
        .retain(|o| !removed_outputs.contains(o.as_str()));
    if out.outputs.is_empty() {
        return Err(PassError::NoOutputs);
    }
    let mut dropped: BTreeSet<String> = BTreeSet::new();
    for &i in &removed {
        report.rewrites.push(Rewrite::new(
            "pruned_module",
            vec![g.nodes[i].id.clone()],
            0,
        ));
        dropped.insert(g.nodes[i].id.clone());
    }
    out.nodes.retain(|n| !dropped.contains(&n.id));

    // Survivors that only fed the pruned modules.
    let live = live_nodes(&out);
    let dead: BTreeSet<String> = out
        .nodes
        .iter()
        .enumerate()
        .filter(|(i, _)| !live.contains(i))
        .map(|(_, n)| n.id.clone())
        .collect();
    for id in &dead {
        report
            .rewrites
            .push(Rewrite::new("dead", vec![id.clone()], 0));
    }
    out.nodes.retain(|n| !dead.contains(&n.id));
    out.prune_unreferenced_tensors();
    finish(out, report)
}

fn live_nodes(g: &Graph) -> BTreeSet<usize> {
    let producers = g.producers();
    let mut live = BTreeSet::new();
    let mut stack: Vec<&str> = g.outputs.iter().map(String::as_str).collect();
    while let Some(t) = stack.pop() {
        if let Some(&p) = producers.get(t) {
            if live.insert(p) {
                stack.extend(g.nodes[p].inputs.iter().map(String::as_str));
            }
        }
    }
    live
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{DType, Node, NodeKind, TensorSpec};

    fn stack() -> Graph {
        let mut g = Graph::default();
        g.nodes.push(Node::new(
            "bb",
            NodeKind::Relu,
            &["img"],
            "feat",
            ModuleTag::Backbone,
        ));
        g.nodes.push(Node::new(
            "occ",
            NodeKind::Relu,
            &["feat"],
            "occ_out",
            ModuleTag::Occ,
        ));
        g.nodes.push(Node::new(
            "occ2",
            NodeKind::Relu,
            &["occ_out"],
            "occ_feat",
            ModuleTag::Occ,
        ));
        g.nodes.push(Node::new(
            "plan",
            NodeKind::Add,
            &["feat", "occ_feat"],
            "traj",
            ModuleTag::Planner,
        ));
        for t in ["img", "feat", "occ_out", "occ_feat", "traj"] {
            g.tensors
                .insert(t.into(), TensorSpec::new(t, DType::F32, vec![4]));
        }
        g.inputs = vec!["img".into()];
        g.outputs = vec!["traj".into()];
        g
    }

    #[test]
    fn protected_modules_are_rejected() {
        let spec = PruneSpec::new([ModuleTag::Planner]);
        assert_eq!(
            prune_modules(&stack(), &spec).unwrap_err(),
            PassError::ProtectedModule(ModuleTag::Planner)
        );
    }

    #[test]
    fn removed_module_is_rewired() {
        let (out, report) = prune_modules(&stack(), &PruneSpec::new([ModuleTag::Occ])).unwrap();
        assert_eq!(out.nodes.len(), 2);
        assert_eq!(out.node("plan").unwrap().inputs, vec!["feat", "feat"]);
        assert_eq!(report.rewrites.len(), 2);
    }

    #[test]
    fn empty_spec_is_identity() {
        let (out, _) = prune_modules(&stack(), &PruneSpec::default()).unwrap();
        assert_eq!(out, stack());
    }

    #[test]
    fn incompatible_shapes_are_infeasible() {
        let mut g = stack();
        for t in ["occ_feat", "traj"] {
            g.tensors.get_mut(t).unwrap().shape = vec![2, 2];
        }
        g.nodes[2] = Node::new(
            "occ2",
            NodeKind::Reshape,
            &["occ_out"],
            "occ_feat",
            ModuleTag::Occ,
        )
        .with_attr(
            crate::ir::attr::SHAPE,
            crate::ir::AttrValue::Ints(vec![2, 2]),
        );
        g.nodes[3] = Node::new(
            "plan",
            NodeKind::Relu,
            &["occ_feat"],
            "traj",
            ModuleTag::Planner,
        );
        g.validate(crate::ir::ParseMode::Source).unwrap();
        let spec = PruneSpec::new([ModuleTag::Occ]);
        assert!(matches!(
            prune_modules(&g, &spec),
            Err(PassError::Infeasible { .. })
        ));
    }
}
