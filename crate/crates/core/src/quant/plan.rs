use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{compute_scale, ExclusionReason, QuantError, QuantParams, TensorRange};
use crate::ir::{attr, AttrValue, DType, Graph, ModuleTag, Node, NodeKind, ParseMode, TensorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantScheme {
    /// Every module.
    Full,
    /// Backbone and BEV encoder only.
    FeatureExt,
    /// Everything downstream of the BEV encoder.
    Prediction,
}

impl QuantScheme {
    pub fn covers(self, tag: ModuleTag) -> bool {
        match self {
            QuantScheme::Full => true,
            QuantScheme::FeatureExt => tag.is_feature_extraction(),
            QuantScheme::Prediction => !tag.is_feature_extraction(),
        }
    }
}

impl std::str::FromStr for QuantScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "full" => Ok(QuantScheme::Full),
            "featureext" => Ok(QuantScheme::FeatureExt),
            "prediction" => Ok(QuantScheme::Prediction),
            _ => Err(format!("unknown quantization scheme `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizationPlan {
    pub scheme: QuantScheme,
    pub quantized_nodes: BTreeSet<String>,
    pub excluded_nodes: BTreeMap<String, ExclusionReason>,
    pub params: BTreeMap<String, QuantParams>,
}

impl QuantizationPlan {
    pub fn empty(scheme: QuantScheme) -> Self {
        Self {
            scheme,
            quantized_nodes: BTreeSet::new(),
            excluded_nodes: BTreeMap::new(),
            params: BTreeMap::new(),
        }
    }
}

/// Operand positions that are read as int8 for a quantized node.
pub(crate) fn quantized_operands(node: &Node) -> std::ops::Range<usize> {
    match node.kind {
        NodeKind::FusedMHA => 0..node.inputs.len(),
        _ => 0..2,
    }
}

/// Pick the candidates covered by `scheme` and compute one set of
/// parameters per node from the union of its operand ranges.
pub fn plan(
    g: &Graph,
    scheme: QuantScheme,
    ranges: &BTreeMap<String, TensorRange>,
) -> Result<QuantizationPlan, QuantError> {
    plan_with(g, scheme, ranges, super::LONG_SEQUENCE_THRESHOLD)
}

/// [`plan`] with a custom long-sequence threshold.
pub fn plan_with(
    g: &Graph,
    scheme: QuantScheme,
    ranges: &BTreeMap<String, TensorRange>,
    long_sequence_threshold: usize,
) -> Result<QuantizationPlan, QuantError> {
    let selection = super::select::select_nodes_with(g, long_sequence_threshold)?;
    let mut out = QuantizationPlan::empty(scheme);
    out.excluded_nodes = selection.excluded;
    for node in &g.nodes {
        if !selection.candidates.contains(&node.id) || !scheme.covers(node.tag) {
            continue;
        }
        let mut merged: Option<TensorRange> = None;
        for i in quantized_operands(node) {
            let t = &node.inputs[i];
            let r = ranges.get(t).ok_or_else(|| QuantError::MissingRange {
                node: node.id.clone(),
                tensor: t.clone(),
            })?;
            merged = Some(match merged {
                None => r.clone(),
                Some(m) => m.union(r),
            });
        }
        let mut r = merged.expect("quantizable kinds have operands");
        r.tensor = node.id.clone();
        out.params.insert(node.id.clone(), compute_scale(&r, 8)?);
        out.quantized_nodes.insert(node.id.clone());
    }
    Ok(out)
}

fn declare(g: &mut Graph, name: &str, dtype: DType, shape: Vec<usize>) -> Result<(), QuantError> {
    if g.tensors.contains_key(name) {
        return Err(crate::ir::IrError::validation(name, "tensor name already in use").into());
    }
    g.tensors
        .insert(name.to_string(), TensorSpec::new(name, dtype, shape));
    Ok(())
}

/// Rewrite each planned node to read int8 operands: `Quantize` nodes are
/// inserted on its operands and a `Dequantize` node restores its output.
pub fn apply_plan(g: &Graph, plan: &QuantizationPlan) -> Result<Graph, QuantError> {
    if let Some(n) = g
        .nodes
        .iter()
        .find(|n| n.is_int8() || matches!(n.kind, NodeKind::Quantize | NodeKind::Dequantize))
    {
        return Err(QuantError::AlreadyQuantized(n.id.clone()));
    }
    for id in &plan.quantized_nodes {
        let ok = g.node(id).is_some_and(|n| {
            matches!(
                n.kind,
                NodeKind::MatMul
                    | NodeKind::Conv2d
                    | NodeKind::FusedConvAdd
                    | NodeKind::FusedMatMulAdd
                    | NodeKind::FusedMHA
            )
        });
        if !ok || !plan.params.contains_key(id) {
            return Err(QuantError::UnknownNode(id.clone()));
        }
    }

    let mut out = g.clone();
    out.nodes.clear();
    for node in &g.nodes {
        if !plan.quantized_nodes.contains(&node.id) {
            out.nodes.push(node.clone());
            continue;
        }
        let p = &plan.params[&node.id];
        let mut rewritten = node.clone();
        for i in quantized_operands(node) {
            let src = &node.inputs[i];
            let q_name = format!("{}.q{i}", node.id);
            let shape = g.spec(src)?.shape.clone();
            declare(&mut out, &q_name, DType::I8, shape)?;
            out.nodes.push(
                Node::new(
                    q_name.clone(),
                    NodeKind::Quantize,
                    &[src],
                    q_name.clone(),
                    node.tag,
                )
                .with_attr(attr::SCALE, AttrValue::Float(p.scale))
                .with_attr(attr::ZERO_POINT, AttrValue::Int(p.zero_point))
                .with_attr(attr::Q_MIN, AttrValue::Int(p.q_min))
                .with_attr(attr::Q_MAX, AttrValue::Int(p.q_max)),
            );
            rewritten.inputs[i] = q_name;
        }
        let out_name = node.output().to_string();
        let acc = format!("{out_name}.acc");
        declare(&mut out, &acc, DType::F32, g.spec(&out_name)?.shape.clone())?;
        rewritten.outputs = vec![acc.clone()];
        rewritten.attrs.insert(attr::INT8.into(), AttrValue::Int(1));
        rewritten
            .attrs
            .insert(attr::QUANT_SCALE.into(), AttrValue::Float(p.scale));
        rewritten
            .attrs
            .insert(attr::QUANT_ZERO_POINT.into(), AttrValue::Int(p.zero_point));
        // Attention dequantizes its operands internally; GEMM/conv accumulators sit at s^2.
        let dq_scale = if node.kind == NodeKind::FusedMHA {
            1.0
        } else {
            p.scale * p.scale
        };
        let tag = node.tag;
        out.nodes.push(rewritten);
        out.nodes.push(
            Node::new(
                format!("{}.dq", node.id),
                NodeKind::Dequantize,
                &[&acc],
                out_name,
                tag,
            )
            .with_attr(attr::SCALE, AttrValue::Float(dq_scale))
            .with_attr(attr::ZERO_POINT, AttrValue::Int(0)),
        );
    }
    out.validate(ParseMode::Optimized)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::CalibrationSet;
    use crate::ir::{interpret, Tensor};
    use crate::quant::calibrate;
    use rand::{Rng, SeedableRng};

    fn matmul_graph(tag: ModuleTag) -> Graph {
        let mut g = Graph::default();
        g.nodes
            .push(Node::new("mm", NodeKind::MatMul, &["a", "b"], "y", tag));
        for t in ["a", "b", "y"] {
            g.tensors
                .insert(t.into(), TensorSpec::new(t, DType::F32, vec![4, 4]));
        }
        g.inputs = vec!["a".into(), "b".into()];
        g.outputs = vec!["y".into()];
        g
    }

    #[test]
    fn empty_plan_is_identity() {
        let g = matmul_graph(ModuleTag::Backbone);
        let q = apply_plan(&g, &QuantizationPlan::empty(QuantScheme::Full)).unwrap();
        assert_eq!(q, g);
    }

    #[test]
    fn scheme_filters_by_tag() {
        let g = matmul_graph(ModuleTag::Planner);
        let calib = CalibrationSet::random(&g, 4, 1);
        let ranges = calibrate(&g, &calib).unwrap();
        assert!(plan(&g, QuantScheme::FeatureExt, &ranges)
            .unwrap()
            .quantized_nodes
            .is_empty());
        assert_eq!(
            plan(&g, QuantScheme::Prediction, &ranges)
                .unwrap()
                .quantized_nodes
                .len(),
            1
        );
    }

    #[test]
    fn quantized_matmul_error_is_first_order_bounded() {
        let g = matmul_graph(ModuleTag::Backbone);
        let calib = CalibrationSet::random(&g, 16, 7);
        let ranges = calibrate(&g, &calib).unwrap();
        let p = plan(&g, QuantScheme::Full, &ranges).unwrap();
        let q = apply_plan(&g, &p).unwrap();
        let s = p.params["mm"].scale;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let mut bind = BTreeMap::new();
            for name in ["a", "b"] {
                let data = (0..16).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                bind.insert(name.to_string(), Tensor::new(vec![4, 4], data).unwrap());
            }
            let exact = interpret(&g, &bind).unwrap();
            let approx = interpret(&q, &bind).unwrap();
            let (a, b) = (&bind["a"], &bind["b"]);
            for i in 0..4 {
                for j in 0..4 {
                    let row_a: f64 = (0..4).map(|k| a.data[i * 4 + k].abs()).sum();
                    let col_b: f64 = (0..4).map(|k| b.data[k * 4 + j].abs()).sum();
                    let bound = s * (row_a + col_b);
                    let err = (exact["y"].data[i * 4 + j] - approx["y"].data[i * 4 + j]).abs();
                    assert!(err <= bound + 1e-6, "err {err} > bound {bound}");
                }
            }
        }
    }

    #[test]
    fn reapplication_is_rejected() {
        let g = matmul_graph(ModuleTag::Backbone);
        let ranges = calibrate(&g, &CalibrationSet::random(&g, 2, 3)).unwrap();
        let p = plan(&g, QuantScheme::Full, &ranges).unwrap();
        let q = apply_plan(&g, &p).unwrap();
        assert!(matches!(
            apply_plan(&q, &p),
            Err(QuantError::AlreadyQuantized(_))
        ));
    }

    #[test]
    fn unknown_node_is_rejected() {
        let g = matmul_graph(ModuleTag::Backbone);
        let mut p = QuantizationPlan::empty(QuantScheme::Full);
        p.quantized_nodes.insert("nope".into());
        assert!(matches!(
            apply_plan(&g, &p),
            Err(QuantError::UnknownNode(_))
        ));
    }
}
