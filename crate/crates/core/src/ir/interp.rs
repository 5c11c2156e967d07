//! Reference interpreter. All arithmetic is `f64`; [`interpret`] rounds the
//! graph outputs to `f32` precision.

use std::collections::BTreeMap;

use super::shape::{conv_out_hw, pair_attr, resolve_axis, resolve_perm};
use super::tensor::Tensor;
use super::topo::topo_indices;
use super::{attr, ops, Graph, IrError, Node, NodeKind};
use crate::quant::{dequantize_value, quantize_value, round_half_away, QuantParams};

fn fail(node: &Node, msg: impl Into<String>) -> IrError {
    IrError::Eval {
        node: node.id.clone(),
        message: msg.into(),
    }
}

fn shape_err(node: &Node, what: &str) -> IrError {
    fail(node, format!("incompatible operand shapes for {what}"))
}

pub(crate) fn quant_params_of(node: &Node) -> Result<QuantParams, IrError> {
    let get = |key: &str| {
        node.attr_float(key)
            .ok_or_else(|| fail(node, format!("missing `{key}`")))
    };
    Ok(QuantParams {
        scale: get(attr::SCALE)?,
        zero_point: get(attr::ZERO_POINT)? as i64,
        q_min: get(attr::Q_MIN)? as i64,
        q_max: get(attr::Q_MAX)? as i64,
        degenerate: false,
    })
}

/// Scale/zero point an int8-rewritten node uses to read its operands.
fn operand_scale(node: &Node) -> Result<(f64, f64), IrError> {
    let s = node
        .attr_float(attr::QUANT_SCALE)
        .ok_or_else(|| fail(node, "int8 node without `quant_scale`"))?;
    let zp = node.attr_float(attr::QUANT_ZERO_POINT).unwrap_or(0.0);
    Ok((s, zp))
}

/// Evaluate a single node on concrete input values.
pub(crate) fn eval_node(
    node: &Node,
    inputs: &[&Tensor],
    constant: Option<&Tensor>,
) -> Result<Tensor, IrError> {
    use NodeKind::*;
    let int8 = node.is_int8();
    let shifted: Vec<Tensor>;
    let inputs: Vec<&Tensor> =
        if int8 && matches!(node.kind, MatMul | Conv2d | FusedConvAdd | FusedMatMulAdd) {
            // Integer GEMM operands are offset by the zero point before accumulation.
            let (_, zp) = operand_scale(node)?;
            shifted = inputs[..2].iter().map(|t| t.map(|q| q - zp)).collect();
            shifted.iter().chain(inputs[2..].iter().copied()).collect()
        } else {
            inputs.to_vec()
        };
    let inputs = inputs.as_slice();
    let out = match node.kind {
        Constant => constant
            .cloned()
            .ok_or_else(|| fail(node, "constant value missing"))?,
        MatMul => ops::matmul(inputs[0], inputs[1]).ok_or_else(|| shape_err(node, "matmul"))?,
        Conv2d => conv(node, inputs[0], inputs[1])?,
        Add => ops::add(inputs[0], inputs[1]).ok_or_else(|| shape_err(node, "add"))?,
        Mul => ops::mul(inputs[0], inputs[1]).ok_or_else(|| shape_err(node, "mul"))?,
        Relu => inputs[0].map(|v| v.max(0.0)),
        Scale => {
            let f = node
                .attr_float(attr::FACTOR)
                .ok_or_else(|| fail(node, "missing factor"))?;
            inputs[0].map(|v| v * f)
        }
        Softmax => ops::softmax(inputs[0], resolve_axis(node, inputs[0].rank())?),
        LayerNorm => {
            let eps = node.attr_float(attr::EPS).unwrap_or(1e-5);
            ops::layer_norm(inputs[0], inputs[1], inputs[2], eps)
        }
        Transpose => ops::transpose(inputs[0], &resolve_perm(node, inputs[0].rank())?),
        Reshape => {
            let shape = node
                .attr_ints(attr::SHAPE)
                .ok_or_else(|| fail(node, "missing shape"))?
                .iter()
                .map(|&d| d as usize)
                .collect();
            Tensor::new(shape, inputs[0].data.clone()).map_err(|e| fail(node, e.to_string()))?
        }
        GridSample => ops::grid_sample(inputs[0], inputs[1]),
        Rotate => ops::rotate(inputs[0], node.attr_float(attr::ANGLE).unwrap_or(0.0)),
        Inverse => ops::inverse(inputs[0]).ok_or_else(|| fail(node, "singular matrix"))?,
        ModulatedDeformConv2d => {
            let (x, off, mask, w) = (inputs[0], inputs[1], inputs[2], inputs[3]);
            let stride = pair_attr(node, attr::STRIDE, [1, 1])?;
            let pad = pair_attr(node, attr::PADDING, [0, 0])?;
            let hw = conv_out_hw(node, x.shape[2], x.shape[3], w.shape[2], w.shape[3])?;
            ops::deform_conv2d(x, off, mask, w, stride, pad, hw)
        }
        FusedConvAdd => {
            let acc = conv(node, inputs[0], inputs[1])?;
            let bias = int8_addend(node, inputs[2])?;
            ops::add(&acc, &bias).ok_or_else(|| shape_err(node, "fused conv add"))?
        }
        FusedMatMulAdd => {
            let acc = ops::matmul(inputs[0], inputs[1])
                .ok_or_else(|| shape_err(node, "fused matmul add"))?;
            let bias = int8_addend(node, inputs[2])?;
            ops::add(&acc, &bias).ok_or_else(|| shape_err(node, "fused matmul add"))?
        }
        FusedMHA => {
            let owned: Vec<Tensor>;
            let ins: Vec<&Tensor> = if int8 {
                let (s, zp) = operand_scale(node)?;
                owned = inputs.iter().map(|t| t.map(|q| s * (q - zp))).collect();
                owned.iter().collect()
            } else {
                inputs.to_vec()
            };
            mha(node, &ins)?
        }
        FusedMSDA => msda(node, inputs)?,
        Quantize => {
            let p = quant_params_of(node)?;
            inputs[0].map(|x| quantize_value(x, &p) as f64)
        }
        Dequantize => {
            let s = node
                .attr_float(attr::SCALE)
                .ok_or_else(|| fail(node, "missing scale"))?;
            let zp = node.attr_float(attr::ZERO_POINT).unwrap_or(0.0);
            let p = QuantParams {
                scale: s,
                zero_point: zp as i64,
                q_min: i64::MIN,
                q_max: i64::MAX,
                degenerate: false,
            };
            inputs[0].map(|q| dequantize_value(q, &p))
        }
    };
    Ok(out)
}

fn conv(node: &Node, x: &Tensor, w: &Tensor) -> Result<Tensor, IrError> {
    if x.rank() != 4 || w.rank() != 4 || x.shape[1] != w.shape[1] {
        return Err(shape_err(node, "conv"));
    }
    let stride = pair_attr(node, attr::STRIDE, [1, 1])?;
    let pad = pair_attr(node, attr::PADDING, [0, 0])?;
    let hw = conv_out_hw(node, x.shape[2], x.shape[3], w.shape[2], w.shape[3])?;
    Ok(ops::conv2d(x, w, stride, pad, hw))
}

/// Int8 GEMM/conv nodes accumulate in the integer domain, so a float addend
/// is brought to the accumulator scale `s^2` first.
fn int8_addend(node: &Node, addend: &Tensor) -> Result<Tensor, IrError> {
    if !node.is_int8() {
        return Ok(addend.clone());
    }
    let (s, _) = operand_scale(node)?;
    let acc_scale = s * s;
    Ok(addend.map(|b| round_half_away(b / acc_scale)))
}

fn mha(node: &Node, ins: &[&Tensor]) -> Result<Tensor, IrError> {
    let scale = node.attr_float(attr::SCALE).unwrap_or(1.0);
    let projected;
    let (q, k, v): (&Tensor, &Tensor, &Tensor) = if node.flag(attr::PROJECTED) {
        let proj = |a: &Tensor, b: &Tensor| {
            ops::matmul(a, b).ok_or_else(|| shape_err(node, "attention projection"))
        };
        projected = [
            proj(ins[0], ins[1])?,
            proj(ins[2], ins[3])?,
            proj(ins[4], ins[5])?,
        ];
        (&projected[0], &projected[1], &projected[2])
    } else {
        (ins[0], ins[1], ins[2])
    };
    let transposed;
    let kt = if node.flag(attr::TRANSPOSE_K) {
        transposed = ops::transpose_last_two(k);
        &transposed
    } else {
        k
    };
    ops::attention(q, kt, v, scale).ok_or_else(|| shape_err(node, "attention"))
}

fn msda(node: &Node, ins: &[&Tensor]) -> Result<Tensor, IrError> {
    let per = if node.flag(attr::PROJECTED) { 4 } else { 3 };
    let mut acc: Option<Tensor> = None;
    for branch in ins.chunks(per) {
        let projected;
        let grid = if per == 4 {
            projected = ops::matmul(branch[1], branch[2])
                .ok_or_else(|| shape_err(node, "sampling projection"))?;
            &projected
        } else {
            branch[1]
        };
        let sampled = ops::grid_sample(branch[0], grid);
        let weighted = ops::mul(&sampled, branch[per - 1])
            .ok_or_else(|| shape_err(node, "attention weights"))?;
        acc = Some(match acc {
            None => weighted,
            Some(a) => ops::add(&a, &weighted).ok_or_else(|| shape_err(node, "branch sum"))?,
        });
    }
    acc.ok_or_else(|| fail(node, "no branches"))
}

fn bind_inputs(
    g: &Graph,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>, IrError> {
    let mut env = BTreeMap::new();
    for name in &g.inputs {
        let t = inputs
            .get(name)
            .ok_or_else(|| IrError::MissingInput(name.clone()))?;
        let spec = g.spec(name)?;
        if t.shape != spec.shape {
            return Err(IrError::validation(
                name,
                format!(
                    "bound shape {:?} does not match declared {:?}",
                    t.shape, spec.shape
                ),
            ));
        }
        env.insert(name.clone(), t.clone());
    }
    for (name, t) in &g.constants {
        env.insert(name.clone(), t.clone());
    }
    Ok(env)
}

/// Evaluate every tensor in the graph at full `f64` precision.
pub fn evaluate_all(
    g: &Graph,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>, IrError> {
    let mut env = bind_inputs(g, inputs)?;
    for i in topo_indices(g)? {
        let node = &g.nodes[i];
        let value = {
            let args: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|t| {
                    env.get(t)
                        .ok_or_else(|| fail(node, format!("input `{t}` not available")))
                })
                .collect::<Result<_, _>>()?;
            let constant = if node.kind == NodeKind::Constant {
                g.constants.get(node.output())
            } else {
                None
            };
            eval_node(node, &args, constant)?
        };
        let declared = g.spec(node.output())?;
        if value.shape != declared.shape {
            return Err(IrError::NodeShape {
                node: node.id.clone(),
                expected: declared.shape.clone(),
                actual: value.shape,
            });
        }
        env.insert(node.output().to_string(), value);
    }
    Ok(env)
}

/// Run the graph and return its outputs, rounded to `f32` precision.
pub fn interpret(
    g: &Graph,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>, IrError> {
    let env = evaluate_all(g, inputs)?;
    Ok(g.outputs
        .iter()
        .map(|o| (o.clone(), env[o].to_f32_precision()))
        .collect())
}
