//! One small golden graph per node kind under `fixtures/kinds/`.
//! Regenerate with `UPDATE_FIXTURES=1 cargo test --test golden_kinds`.

use std::path::PathBuf;

use avco_core::fixtures::{example_inputs, uniad_like};
use avco_core::ir::{
    attr, interpret, parse_graph, parse_optimized_graph, serialize_graph, shape, AttrValue, DType,
    Graph, ModuleTag, Node, NodeKind, ParseMode, Tensor, TensorSpec,
};

struct Fixture {
    g: Graph,
}

impl Fixture {
    fn new() -> Self {
        Self {
            g: Graph::default(),
        }
    }

    fn input(&mut self, name: &str, shape: &[usize]) -> &mut Self {
        self.g.tensors.insert(
            name.into(),
            TensorSpec::new(name, DType::F32, shape.to_vec()),
        );
        self.g.inputs.push(name.into());
        self
    }

    fn constant(&mut self, name: &str, shape: &[usize], data: &[f64]) -> &mut Self {
        let t = Tensor::new(shape.to_vec(), data.to_vec()).expect("fixture constant");
        self.g.tensors.insert(
            name.into(),
            TensorSpec::new(name, DType::F32, shape.to_vec()),
        );
        self.g.constants.insert(name.into(), t);
        self
    }

    fn node(
        &mut self,
        id: &str,
        kind: NodeKind,
        inputs: &[&str],
        attrs: &[(&str, AttrValue)],
    ) -> &mut Self {
        let mut node = Node::new(id, kind, inputs, id, ModuleTag::Other);
        for (k, v) in attrs {
            node = node.with_attr(k, v.clone());
        }
        let shapes: Vec<Vec<usize>> = if kind == NodeKind::Constant {
            vec![self.g.constants[id].shape.clone()]
        } else {
            inputs
                .iter()
                .map(|t| self.g.tensors[*t].shape.clone())
                .collect()
        };
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let (dtype, out) = shape::infer(&node, &refs).expect("fixture shapes");
        self.g
            .tensors
            .insert(id.into(), TensorSpec::new(id, dtype, out));
        self.g.nodes.push(node);
        self
    }

    fn output(&mut self, t: &str) -> Graph {
        self.g.outputs.push(t.into());
        std::mem::take(&mut self.g)
    }
}

fn pair(v: i64) -> AttrValue {
    AttrValue::Ints(vec![v, v])
}

fn fixture(kind: NodeKind) -> Graph {
    use NodeKind::*;
    let mut f = Fixture::new();
    let ramp = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| (i as f64 - n as f64 / 2.0) / n as f64)
            .collect()
    };
    match kind {
        Constant => f
            .constant("c", &[2], &[1.5, -2.0])
            .node("c", Constant, &[], &[])
            .output("c"),
        MatMul => f
            .input("x", &[2, 3])
            .constant("w", &[3, 2], &ramp(6))
            .node("y", MatMul, &["x", "w"], &[])
            .output("y"),
        Conv2d => f
            .input("x", &[1, 1, 3, 3])
            .constant("w", &[1, 1, 2, 2], &[0.5, -0.25, 0.25, 1.0])
            .node(
                "y",
                Conv2d,
                &["x", "w"],
                &[(attr::STRIDE, pair(1)), (attr::PADDING, pair(0))],
            )
            .output("y"),
        Add => f
            .input("x", &[2, 2])
            .constant("b", &[2], &[0.1, -0.1])
            .node("y", Add, &["x", "b"], &[])
            .output("y"),
        Mul => f
            .input("x", &[2, 2])
            .constant("s", &[2], &[2.0, 0.5])
            .node("y", Mul, &["x", "s"], &[])
            .output("y"),
        Relu => f.input("x", &[4]).node("y", Relu, &["x"], &[]).output("y"),
        Softmax => f
            .input("x", &[2, 3])
            .node("y", Softmax, &["x"], &[(attr::AXIS, AttrValue::Int(-1))])
            .output("y"),
        Scale => f
            .input("x", &[3])
            .node("y", Scale, &["x"], &[(attr::FACTOR, AttrValue::Float(0.5))])
            .output("y"),
        LayerNorm => f
            .input("x", &[2, 4])
            .constant("gamma", &[4], &[1.0; 4])
            .constant("beta", &[4], &[0.0; 4])
            .node(
                "y",
                LayerNorm,
                &["x", "gamma", "beta"],
                &[(attr::EPS, AttrValue::Float(1e-5))],
            )
            .output("y"),
        Transpose => f
            .input("x", &[2, 3])
            .node(
                "y",
                Transpose,
                &["x"],
                &[(attr::PERM, AttrValue::Ints(vec![1, 0]))],
            )
            .output("y"),
        Reshape => f
            .input("x", &[2, 3])
            .node(
                "y",
                Reshape,
                &["x"],
                &[(attr::SHAPE, AttrValue::Ints(vec![3, 2]))],
            )
            .output("y"),
        GridSample => f
            .input("x", &[1, 1, 2, 2])
            .constant("grid", &[1, 1, 2, 2], &[-0.5, 0.0, 0.5, 0.25])
            .node("y", GridSample, &["x", "grid"], &[])
            .output("y"),
        Rotate => f
            .input("x", &[2, 2])
            .node("y", Rotate, &["x"], &[(attr::ANGLE, AttrValue::Float(0.5))])
            .output("y"),
        Inverse => f
            .input("x", &[2, 2])
            .node("y", Inverse, &["x"], &[])
            .output("y"),
        ModulatedDeformConv2d => f
            .input("x", &[1, 1, 3, 3])
            .input("offset", &[1, 8, 2, 2])
            .input("mask", &[1, 4, 2, 2])
            .constant("w", &[1, 1, 2, 2], &[0.5, -0.25, 0.25, 1.0])
            .node(
                "y",
                ModulatedDeformConv2d,
                &["x", "offset", "mask", "w"],
                &[],
            )
            .output("y"),
        FusedMHA => f
            .input("q", &[1, 2, 4])
            .input("k", &[1, 2, 4])
            .input("v", &[1, 2, 4])
            .node(
                "y",
                FusedMHA,
                &["q", "k", "v"],
                &[
                    (attr::TRANSPOSE_K, AttrValue::Int(1)),
                    (attr::SCALE, AttrValue::Float(0.5)),
                ],
            )
            .output("y"),
        FusedMSDA => f
            .input("x", &[1, 1, 2, 2])
            .constant("grid", &[1, 1, 2, 2], &[-0.5, 0.0, 0.5, 0.25])
            .constant("aw", &[1, 1, 1, 2], &[0.75, 0.25])
            .node(
                "y",
                FusedMSDA,
                &["x", "grid", "aw"],
                &[(attr::BRANCHES, AttrValue::Int(1))],
            )
            .output("y"),
        FusedConvAdd => f
            .input("x", &[1, 1, 3, 3])
            .constant("w", &[1, 1, 2, 2], &[0.5, -0.25, 0.25, 1.0])
            .constant("b", &[1, 1, 1, 1], &[0.1])
            .node(
                "y",
                FusedConvAdd,
                &["x", "w", "b"],
                &[(attr::STRIDE, pair(1)), (attr::PADDING, pair(0))],
            )
            .output("y"),
        FusedMatMulAdd => f
            .input("x", &[2, 3])
            .constant("w", &[3, 2], &ramp(6))
            .constant("b", &[2], &[0.1, -0.1])
            .node("y", FusedMatMulAdd, &["x", "w", "b"], &[])
            .output("y"),
        Quantize | Dequantize => {
            let q = [
                (attr::SCALE, AttrValue::Float(0.0078125)),
                (attr::ZERO_POINT, AttrValue::Int(0)),
                (attr::Q_MIN, AttrValue::Int(-128)),
                (attr::Q_MAX, AttrValue::Int(127)),
            ];
            f.input("x", &[3]).node("q", Quantize, &["x"], &q);
            if kind == Quantize {
                return f.output("q");
            }
            f.node("y", Dequantize, &["q"], &q[..2]).output("y")
        }
    }
}

fn kinds_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join("kinds")
}

fn check_golden(path: PathBuf, text: &str) {
    if std::env::var_os("UPDATE_FIXTURES").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, text).unwrap();
        return;
    }
    let golden =
        std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(
        golden,
        text,
        "{} is stale; rerun with UPDATE_FIXTURES=1",
        path.display()
    );
}

#[test]
fn every_kind_has_a_golden_fixture() {
    for kind in NodeKind::ALL {
        let g = fixture(kind);
        g.validate(ParseMode::Optimized).unwrap();
        assert!(g.nodes.iter().any(|n| n.kind == kind));
        let text = serialize_graph(&g);
        check_golden(kinds_dir().join(format!("{kind}.json")), &text);

        let parsed = if kind.is_pass_only() {
            parse_optimized_graph(&text)
        } else {
            parse_graph(&text)
        }
        .unwrap();
        assert_eq!(parsed, g);
        if kind.is_pass_only() {
            assert!(
                parse_graph(&text).is_err(),
                "{kind} accepted in a source model"
            );
        }
        let out = interpret(&parsed, &example_inputs(&parsed, 5)).unwrap();
        assert!(
            out.values().all(|t| t.data.iter().all(|v| v.is_finite())),
            "{kind}"
        );
    }
}

#[test]
fn bundled_model_matches_its_golden_file() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join("uniad_like.json");
    check_golden(path.clone(), &serialize_graph(&uniad_like()));
    assert_eq!(
        parse_graph(&std::fs::read_to_string(path).unwrap()).unwrap(),
        uniad_like()
    );
}

#[test]
fn format_doc_examples_match_fixtures() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/graph-format.md");
    let doc = std::fs::read_to_string(&path).unwrap();
    let (_, examples) = doc
        .split_once("## Golden examples")
        .expect("examples section");
    let mut seen = Vec::new();
    for section in examples.split("\n### ").skip(1) {
        let (name, body) = section.split_once('\n').unwrap();
        let kind = NodeKind::ALL
            .into_iter()
            .find(|k| k.to_string() == name.trim())
            .unwrap_or_else(|| panic!("{name}"));
        let json = body
            .split("```json\n")
            .nth(1)
            .and_then(|b| b.split("```").next())
            .expect("json block");
        assert_eq!(
            parse_optimized_graph(json).unwrap(),
            fixture(kind),
            "{kind}"
        );
        seen.push(kind);
    }
    assert_eq!(seen, NodeKind::ALL.to_vec());
}
