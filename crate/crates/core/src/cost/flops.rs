use crate::ir::shape::{matmul_shape, swap_last_two};
use crate::ir::tensor::broadcast_shapes;
use crate::ir::{attr, Graph, IrError, Node, NodeKind};

fn numel(shape: &[usize]) -> u64 {
    shape.iter().map(|&d| d as u64).product()
}

fn matmul_flops(a: &[usize], b: &[usize]) -> Result<(u64, Vec<usize>), IrError> {
    let out = matmul_shape(a, b).ok_or_else(|| IrError::Shape(format!("matmul {a:?} x {b:?}")))?;
    let k = *a.last().unwrap_or(&1) as u64;
    Ok((2 * numel(&out) * k, out))
}

fn conv_flops(out: &[usize], w: &[usize]) -> u64 {
    // out = [N, Cout, Ho, Wo], w = [Cout, Cin, kh, kw]
    2 * numel(out) * (w[1] * w[2] * w[3]) as u64
}

/// Floating-point operations for one execution of `node`.
///
/// MatMul is `2·M·K·N` per batch, convolution `2·kh·kw·Cin·Cout·Ho·Wo` per
/// image, elementwise kinds one per output element, and bilinear sampling
/// eight per output element. Fused kinds cost the sum of their parts.
pub fn node_flops(g: &Graph, node: &Node) -> Result<u64, IrError> {
    use NodeKind::*;
    let shape = |t: &str| -> Result<Vec<usize>, IrError> { Ok(g.spec(t)?.shape.clone()) };
    let out = shape(node.output())?;
    let input = |i: usize| shape(&node.inputs[i]);
    Ok(match node.kind {
        Constant | Reshape => 0,
        MatMul => matmul_flops(&input(0)?, &input(1)?)?.0,
        Conv2d => conv_flops(&out, &input(1)?),
        Add | Mul | Relu | Softmax | Scale | LayerNorm | Transpose | Quantize | Dequantize => {
            numel(&out)
        }
        GridSample | Rotate => 8 * numel(&out),
        Inverse => {
            let n = *out.last().unwrap_or(&1) as u64;
            let batch = numel(&out) / (n * n).max(1);
            2 * batch * n * n * n
        }
        ModulatedDeformConv2d => {
            let w = input(3)?;
            let taps = (w[2] * w[3]) as u64;
            let samples = out[0] as u64 * taps * w[1] as u64 * (out[2] * out[3]) as u64;
            conv_flops(&out, &w) + 8 * samples + samples
        }
        FusedConvAdd => conv_flops(&out, &input(1)?) + numel(&out),
        FusedMatMulAdd => matmul_flops(&input(0)?, &input(1)?)?.0 + numel(&out),
        FusedMHA => {
            let mut total = 0;
            let (q, k, v) = if node.flag(attr::PROJECTED) {
                let mut proj = Vec::new();
                for i in 0..3 {
                    let (f, s) = matmul_flops(&input(2 * i)?, &input(2 * i + 1)?)?;
                    total += f;
                    proj.push(s);
                }
                (proj[0].clone(), proj[1].clone(), proj[2].clone())
            } else {
                (input(0)?, input(1)?, input(2)?)
            };
            let kt = if node.flag(attr::TRANSPOSE_K) {
                total += numel(&k);
                swap_last_two(&k)
            } else {
                k
            };
            let (f, scores) = matmul_flops(&q, &kt)?;
            total += f;
            if node.attr_float(attr::SCALE).unwrap_or(1.0) != 1.0 {
                total += numel(&scores);
            }
            total += numel(&scores);
            total + matmul_flops(&scores, &v)?.0
        }
        FusedMSDA => {
            let per = if node.flag(attr::PROJECTED) { 4 } else { 3 };
            let mut total = 0;
            let mut acc: Option<Vec<usize>> = None;
            for b in 0..node.inputs.len() / per {
                let base = b * per;
                let value = input(base)?;
                let grid = if per == 4 {
                    let (f, s) = matmul_flops(&input(base + 1)?, &input(base + 2)?)?;
                    total += f;
                    s
                } else {
                    input(base + 1)?
                };
                let sampled = vec![value[0], value[1], grid[1], grid[2]];
                total += 8 * numel(&sampled);
                let weighted = broadcast_shapes(&sampled, &input(base + per - 1)?)
                    .ok_or_else(|| IrError::Shape("deformable attention weights".into()))?;
                total += numel(&weighted);
                acc = Some(match acc {
                    None => weighted,
                    Some(a) => {
                        let s = broadcast_shapes(&a, &weighted).ok_or_else(|| {
                            IrError::Shape("deformable attention branches".into())
                        })?;
                        total += numel(&s);
                        s
                    }
                });
            }
            total
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{AttrValue, DType, ModuleTag, TensorSpec};

    fn graph(specs: &[(&str, Vec<usize>)], nodes: Vec<Node>) -> Graph {
        let mut g = Graph::default();
        for (t, s) in specs {
            g.tensors
                .insert(t.to_string(), TensorSpec::new(*t, DType::F32, s.clone()));
        }
        g.nodes = nodes;
        g
    }

    #[test]
    fn matmul_and_add() {
        let g = graph(
            &[
                ("a", vec![2, 2]),
                ("b", vec![2, 2]),
                ("y", vec![2, 2]),
                ("x", vec![10]),
                ("z", vec![10]),
            ],
            vec![
                Node::new("mm", NodeKind::MatMul, &["a", "b"], "y", ModuleTag::Other),
                Node::new("add", NodeKind::Add, &["x", "x"], "z", ModuleTag::Other),
            ],
        );
        assert_eq!(node_flops(&g, &g.nodes[0]).unwrap(), 16);
        assert_eq!(node_flops(&g, &g.nodes[1]).unwrap(), 10);
    }

    #[test]
    fn fused_attention_equals_constituents() {
        let (s, d) = (16, 8);
        let tag = ModuleTag::Other;
        let specs = [
            ("q", vec![1, s, d]),
            ("k", vec![1, s, d]),
            ("v", vec![1, s, d]),
            ("kt", vec![1, d, s]),
            ("sc", vec![1, s, s]),
            ("sc2", vec![1, s, s]),
            ("p", vec![1, s, s]),
            ("o", vec![1, s, d]),
        ];
        let unfused = vec![
            Node::new("t", NodeKind::Transpose, &["k"], "kt", tag),
            Node::new("qk", NodeKind::MatMul, &["q", "kt"], "sc", tag),
            Node::new("scale", NodeKind::Scale, &["sc"], "sc2", tag)
                .with_attr(attr::FACTOR, AttrValue::Float(0.5)),
            Node::new("sm", NodeKind::Softmax, &["sc2"], "p", tag),
            Node::new("pv", NodeKind::MatMul, &["p", "v"], "o", tag),
        ];
        let fused = Node::new("f", NodeKind::FusedMHA, &["q", "k", "v"], "o", tag)
            .with_attr(attr::SCALE, AttrValue::Float(0.5))
            .with_attr(attr::TRANSPOSE_K, AttrValue::Int(1));
        let g = graph(&specs, unfused.clone());
        let sum: u64 = unfused.iter().map(|n| node_flops(&g, n).unwrap()).sum();
        assert_eq!(node_flops(&g, &fused).unwrap(), sum);
    }
}
