use std::collections::{BTreeMap, BTreeSet};

use super::{shape, topo::topo_indices, Graph, IrError, NodeKind};

/// Whether pass-only node kinds (fused, quantize, dequantize) are accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    /// Source models: only primitive operator kinds.
    Source,
    /// Output of optimization or quantization passes.
    Optimized,
}

pub(crate) fn validate(g: &Graph, mode: ParseMode) -> Result<(), IrError> {
    for (name, spec) in &g.tensors {
        if &spec.name != name {
            return Err(IrError::validation(
                name,
                format!("declared under a different name `{}`", spec.name),
            ));
        }
        if spec.shape.is_empty() || spec.shape.contains(&0) {
            return Err(IrError::validation(
                name,
                format!("shape {:?} must be non-empty with dims >= 1", spec.shape),
            ));
        }
    }

    let mut ids = BTreeSet::new();
    let mut produced: BTreeMap<&str, &str> = BTreeMap::new();
    for node in &g.nodes {
        if !ids.insert(node.id.as_str()) {
            return Err(IrError::validation(&node.id, "duplicate node id"));
        }
        if mode == ParseMode::Source && node.kind.is_pass_only() {
            return Err(IrError::validation(
                &node.id,
                format!("{} nodes may only be introduced by passes", node.kind),
            ));
        }
        let arity = shape::expected_arity(node)?;
        if node.inputs.len() != arity {
            return Err(IrError::validation(
                &node.id,
                format!(
                    "{} expects {arity} inputs, got {}",
                    node.kind,
                    node.inputs.len()
                ),
            ));
        }
        if node.outputs.len() != 1 {
            return Err(IrError::validation(
                &node.id,
                format!("expected 1 output, got {}", node.outputs.len()),
            ));
        }
        for out in &node.outputs {
            if let Some(prev) = produced.insert(out, &node.id) {
                return Err(IrError::validation(
                    out,
                    format!("produced by both `{prev}` and `{}`", node.id),
                ));
            }
            if g.inputs.contains(out) {
                return Err(IrError::validation(
                    out,
                    "graph input cannot be produced by a node",
                ));
            }
            if g.constants.contains_key(out) && node.kind != NodeKind::Constant {
                return Err(IrError::validation(
                    out,
                    "constant tensor cannot be produced by a non-Constant node",
                ));
            }
        }
        if node.kind == NodeKind::Constant && !g.constants.contains_key(node.output()) {
            return Err(IrError::validation(
                node.output(),
                "Constant node has no value in `constants`",
            ));
        }
    }

    for name in &g.inputs {
        g.spec(name)?;
        if g.constants.contains_key(name) {
            return Err(IrError::validation(
                name,
                "graph input cannot also be a constant",
            ));
        }
    }
    for (name, value) in &g.constants {
        let spec = g.spec(name)?;
        if spec.shape != value.shape || value.data.len() != spec.numel() {
            return Err(IrError::validation(
                name,
                format!(
                    "constant value shape {:?} does not match declaration {:?}",
                    value.shape, spec.shape
                ),
            ));
        }
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(IrError::validation(
                name,
                "constant contains non-finite values",
            ));
        }
    }
    for node in &g.nodes {
        for t in node.inputs.iter().chain(&node.outputs) {
            g.spec(t)?;
        }
        for t in &node.inputs {
            let known = g.inputs.contains(t)
                || g.constants.contains_key(t)
                || produced.contains_key(t.as_str());
            if !known {
                return Err(IrError::validation(
                    t,
                    format!(
                        "consumed by `{}` but is not a graph input, constant or node output",
                        node.id
                    ),
                ));
            }
        }
    }
    for out in &g.outputs {
        if !produced.contains_key(out.as_str()) {
            return Err(IrError::validation(
                out,
                "graph output is not produced by any node",
            ));
        }
    }

    let order = topo_indices(g)?;
    for i in order {
        let node = &g.nodes[i];
        let input_shapes: Vec<&[usize]> = if node.kind == NodeKind::Constant {
            vec![&g.constants[node.output()].shape]
        } else {
            node.inputs
                .iter()
                .map(|t| g.tensors[t].shape.as_slice())
                .collect()
        };
        let (dtype, shape) = shape::infer(node, &input_shapes)?;
        let declared = &g.tensors[node.output()];
        if declared.shape != shape {
            return Err(IrError::NodeShape {
                node: node.id.clone(),
                expected: shape,
                actual: declared.shape.clone(),
            });
        }
        if declared.dtype != dtype && node.kind != NodeKind::Constant {
            return Err(IrError::validation(
                &declared.name,
                format!(
                    "declared {:?} but `{}` produces {dtype:?}",
                    declared.dtype, node.id
                ),
            ));
        }
    }
    Ok(())
}
