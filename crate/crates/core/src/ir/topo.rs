use std::collections::{BTreeMap, BTreeSet};

use super::{Graph, IrError};

/// Deterministic topological order of node ids. Among ready nodes the
/// lexicographically smallest id goes first.
pub fn topo_sort(g: &Graph) -> Result<Vec<String>, IrError> {
    let order = topo_indices(g)?;
    Ok(order.into_iter().map(|i| g.nodes[i].id.clone()).collect())
}

/// Same as [`topo_sort`] but returns indices into `g.nodes`.
pub(crate) fn topo_indices(g: &Graph) -> Result<Vec<usize>, IrError> {
    let producers = g.producers();
    let n = g.nodes.len();
    let mut indegree = vec![0usize; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in g.nodes.iter().enumerate() {
        let parents: BTreeSet<usize> = node
            .inputs
            .iter()
            .filter_map(|t| producers.get(t.as_str()).copied())
            .collect();
        indegree[i] = parents.len();
        for p in parents {
            children[p].push(i);
        }
    }

    let mut ready: BTreeSet<(&str, usize)> = (0..n)
        .filter(|&i| indegree[i] == 0)
        .map(|i| (g.nodes[i].id.as_str(), i))
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(entry) = ready.pop_first() {
        let i = entry.1;
        order.push(i);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert((g.nodes[c].id.as_str(), c));
            }
        }
    }

    if order.len() < n {
        return Err(IrError::Cycle(find_cycle(g, &indegree, &children)));
    }
    Ok(order)
}

/// Walk parent links among the unsorted nodes until one repeats.
fn find_cycle(g: &Graph, indegree: &[usize], children: &[Vec<usize>]) -> Vec<String> {
    let stuck: BTreeSet<usize> = (0..indegree.len()).filter(|&i| indegree[i] > 0).collect();
    let mut parent_of: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in &stuck {
        for &c in &children[p] {
            if stuck.contains(&c) {
                parent_of.entry(c).or_insert(p);
            }
        }
    }
    let Some(&start) = stuck.iter().next() else {
        return Vec::new();
    };
    let mut seen = Vec::new();
    let mut cur = start;
    while !seen.contains(&cur) {
        seen.push(cur);
        match parent_of.get(&cur) {
            Some(&p) => cur = p,
            None => break,
        }
    }
    let begin = seen.iter().position(|&x| x == cur).unwrap_or(0);
    let mut cycle: Vec<String> = seen[begin..]
        .iter()
        .map(|&i| g.nodes[i].id.clone())
        .collect();
    cycle.reverse();
    cycle
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{DType, ModuleTag, Node, NodeKind, TensorSpec};

    fn relu(id: &str, input: &str, out: &str) -> Node {
        Node::new(id, NodeKind::Relu, &[input], out, ModuleTag::Other)
    }

    fn graph(nodes: Vec<Node>) -> Graph {
        let mut g = Graph {
            nodes,
            inputs: vec!["x".into()],
            ..Default::default()
        };
        for t in ["x", "a", "b", "c", "d"] {
            g.tensors
                .insert(t.into(), TensorSpec::new(t, DType::F32, vec![2]));
        }
        g
    }

    #[test]
    fn linear_chain() {
        let g = graph(vec![
            relu("C", "b", "c"),
            relu("A", "x", "a"),
            relu("B", "a", "b"),
        ]);
        assert_eq!(topo_sort(&g).unwrap(), ["A", "B", "C"]);
    }

    #[test]
    fn diamond_ties_by_id() {
        let add = Node::new("D", NodeKind::Add, &["b", "c"], "d", ModuleTag::Other);
        let g = graph(vec![
            add,
            relu("C", "a", "c"),
            relu("B", "a", "b"),
            relu("A", "x", "a"),
        ]);
        assert_eq!(topo_sort(&g).unwrap(), ["A", "B", "C", "D"]);
    }

    #[test]
    fn back_edge_is_a_cycle() {
        let g = graph(vec![
            relu("A", "c", "a"),
            relu("B", "a", "b"),
            relu("C", "b", "c"),
        ]);
        match topo_sort(&g) {
            Err(IrError::Cycle(ids)) => {
                let mut sorted = ids.clone();
                sorted.sort();
                assert_eq!(sorted, ["A", "B", "C"]);
            }
            other => panic!("expected cycle, got {other:?}"),
        }
    }
}
