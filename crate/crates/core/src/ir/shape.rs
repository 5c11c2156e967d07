//! Static shape inference. Every node's declared output spec must match what
//! these rules derive from its inputs.

use super::tensor::broadcast_shapes;
use super::{attr, DType, IrError, Node, NodeKind};

fn err(node: &Node, msg: impl Into<String>) -> IrError {
    IrError::Eval {
        node: node.id.clone(),
        message: msg.into(),
    }
}

pub fn matmul_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return None;
    }
    let mut out = broadcast_shapes(&a[..a.len() - 2], &b[..b.len() - 2])?;
    out.push(m);
    out.push(n);
    Some(out)
}

pub fn swap_last_two(s: &[usize]) -> Vec<usize> {
    let mut out = s.to_vec();
    let r = out.len();
    out.swap(r - 2, r - 1);
    out
}

pub(crate) fn pair_attr(
    node: &Node,
    key: &str,
    default: [usize; 2],
) -> Result<[usize; 2], IrError> {
    match node.attr_ints(key) {
        None if !node.attrs.contains_key(key) => Ok(default),
        Some([a, b]) if *a >= 0 && *b >= 0 => Ok([*a as usize, *b as usize]),
        _ => Err(IrError::UnsupportedAttr {
            node: node.id.clone(),
            attr: key.to_string(),
            reason: "expected a pair of non-negative integers".into(),
        }),
    }
}

pub(crate) fn conv_out_hw(
    node: &Node,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Result<(usize, usize), IrError> {
    let stride = pair_attr(node, attr::STRIDE, [1, 1])?;
    let pad = pair_attr(node, attr::PADDING, [0, 0])?;
    if stride[0] == 0 || stride[1] == 0 {
        return Err(IrError::UnsupportedAttr {
            node: node.id.clone(),
            attr: attr::STRIDE.into(),
            reason: "stride must be positive".into(),
        });
    }
    if h + 2 * pad[0] < kh || w + 2 * pad[1] < kw {
        return Err(err(node, "kernel larger than padded input"));
    }
    Ok((
        (h + 2 * pad[0] - kh) / stride[0] + 1,
        (w + 2 * pad[1] - kw) / stride[1] + 1,
    ))
}

pub(crate) fn conv_shape(node: &Node, x: &[usize], w: &[usize]) -> Result<Vec<usize>, IrError> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
        return Err(err(
            node,
            format!("conv expects x [N,C,H,W] and w [Co,C,kh,kw], got {x:?} and {w:?}"),
        ));
    }
    let (ho, wo) = conv_out_hw(node, x[2], x[3], w[2], w[3])?;
    Ok(vec![x[0], w[0], ho, wo])
}

pub(crate) fn grid_sample_shape(
    node: &Node,
    x: &[usize],
    grid: &[usize],
) -> Result<Vec<usize>, IrError> {
    if x.len() != 4 || grid.len() != 4 || grid[3] != 2 || grid[0] != x[0] {
        return Err(err(
            node,
            format!("grid sample expects x [N,C,H,W] and grid [N,Ho,Wo,2], got {x:?} and {grid:?}"),
        ));
    }
    Ok(vec![x[0], x[1], grid[1], grid[2]])
}

fn need_matmul(node: &Node, a: &[usize], b: &[usize]) -> Result<Vec<usize>, IrError> {
    matmul_shape(a, b).ok_or_else(|| {
        err(
            node,
            format!("incompatible matmul operands {a:?} and {b:?}"),
        )
    })
}

fn need_broadcast(node: &Node, a: &[usize], b: &[usize]) -> Result<Vec<usize>, IrError> {
    broadcast_shapes(a, b)
        .ok_or_else(|| err(node, format!("shapes {a:?} and {b:?} do not broadcast")))
}

pub(crate) fn resolve_axis(node: &Node, rank: usize) -> Result<usize, IrError> {
    let axis = node.attr_int(attr::AXIS).unwrap_or(-1);
    let resolved = if axis < 0 { axis + rank as i64 } else { axis };
    if resolved < 0 || resolved >= rank as i64 {
        return Err(IrError::UnsupportedAttr {
            node: node.id.clone(),
            attr: attr::AXIS.into(),
            reason: format!("axis {axis} out of range for rank {rank}"),
        });
    }
    Ok(resolved as usize)
}

pub(crate) fn resolve_perm(node: &Node, rank: usize) -> Result<Vec<usize>, IrError> {
    match node.attr_ints(attr::PERM) {
        None => {
            if rank < 2 {
                return Err(err(node, "transpose needs rank >= 2"));
            }
            let mut p: Vec<usize> = (0..rank).collect();
            p.swap(rank - 2, rank - 1);
            Ok(p)
        }
        Some(perm) => {
            let mut seen = vec![false; rank];
            let mut out = Vec::with_capacity(rank);
            for &p in perm {
                if p < 0 || p as usize >= rank || seen[p as usize] {
                    return Err(IrError::UnsupportedAttr {
                        node: node.id.clone(),
                        attr: attr::PERM.into(),
                        reason: format!("{perm:?} is not a permutation of rank {rank}"),
                    });
                }
                seen[p as usize] = true;
                out.push(p as usize);
            }
            if out.len() != rank {
                return Err(IrError::UnsupportedAttr {
                    node: node.id.clone(),
                    attr: attr::PERM.into(),
                    reason: format!("{perm:?} has wrong length for rank {rank}"),
                });
            }
            Ok(out)
        }
    }
}

/// Whether `perm` swaps exactly the last two axes.
pub fn is_last_two_swap(perm: &[usize]) -> bool {
    let r = perm.len();
    r >= 2
        && perm[..r - 2].iter().enumerate().all(|(i, &p)| p == i)
        && perm[r - 2] == r - 1
        && perm[r - 1] == r - 2
}

/// Expected number of inputs for a node (some kinds depend on attributes).
pub fn expected_arity(node: &Node) -> Result<usize, IrError> {
    use NodeKind::*;
    Ok(match node.kind {
        Constant => 0,
        Relu | Softmax | Scale | Transpose | Reshape | Rotate | Inverse | Quantize | Dequantize => {
            1
        }
        MatMul | Conv2d | Add | Mul | GridSample => 2,
        LayerNorm | FusedConvAdd | FusedMatMulAdd => 3,
        ModulatedDeformConv2d => 4,
        FusedMHA => {
            if node.flag(attr::PROJECTED) {
                6
            } else {
                3
            }
        }
        FusedMSDA => {
            let branches = node
                .attr_int(attr::BRANCHES)
                .filter(|b| *b >= 1)
                .ok_or_else(|| IrError::UnsupportedAttr {
                    node: node.id.clone(),
                    attr: attr::BRANCHES.into(),
                    reason: "must be a positive integer".into(),
                })? as usize;
            branches * if node.flag(attr::PROJECTED) { 4 } else { 3 }
        }
    })
}

/// Infer the output dtype and shape of `node` from its input shapes. For
/// `Constant` nodes the caller supplies the constant's shape as the single
/// element of `inputs`.
pub fn infer(node: &Node, inputs: &[&[usize]]) -> Result<(DType, Vec<usize>), IrError> {
    use NodeKind::*;
    let f32 = |s: Vec<usize>| Ok((DType::F32, s));
    match node.kind {
        Constant => f32(inputs[0].to_vec()),
        MatMul => f32(need_matmul(node, inputs[0], inputs[1])?),
        Conv2d => f32(conv_shape(node, inputs[0], inputs[1])?),
        Add | Mul => f32(need_broadcast(node, inputs[0], inputs[1])?),
        Relu => f32(inputs[0].to_vec()),
        Scale => {
            if node.attr_float(attr::FACTOR).is_none() {
                return Err(IrError::UnsupportedAttr {
                    node: node.id.clone(),
                    attr: attr::FACTOR.into(),
                    reason: "scale needs a numeric factor".into(),
                });
            }
            f32(inputs[0].to_vec())
        }
        Softmax => {
            resolve_axis(node, inputs[0].len())?;
            f32(inputs[0].to_vec())
        }
        LayerNorm => {
            let x = inputs[0];
            let d = *x.last().unwrap_or(&0);
            if inputs[1] != [d] || inputs[2] != [d] {
                return Err(err(node, format!("layer norm affine params must be [{d}]")));
            }
            f32(x.to_vec())
        }
        Transpose => {
            let perm = resolve_perm(node, inputs[0].len())?;
            f32(perm.iter().map(|&p| inputs[0][p]).collect())
        }
        Reshape => {
            let target = node
                .attr_ints(attr::SHAPE)
                .ok_or_else(|| IrError::UnsupportedAttr {
                    node: node.id.clone(),
                    attr: attr::SHAPE.into(),
                    reason: "reshape needs a target shape".into(),
                })?;
            if target.is_empty() || target.iter().any(|&d| d < 1) {
                return Err(IrError::UnsupportedAttr {
                    node: node.id.clone(),
                    attr: attr::SHAPE.into(),
                    reason: format!("{target:?} must be non-empty with positive dims"),
                });
            }
            let target: Vec<usize> = target.iter().map(|&d| d as usize).collect();
            if target.iter().product::<usize>() != inputs[0].iter().product::<usize>() {
                return Err(err(
                    node,
                    format!("cannot reshape {:?} to {target:?}", inputs[0]),
                ));
            }
            f32(target)
        }
        GridSample => f32(grid_sample_shape(node, inputs[0], inputs[1])?),
        Rotate => {
            if inputs[0].len() < 2 {
                return Err(err(node, "rotate needs rank >= 2"));
            }
            if node.attr_float(attr::ANGLE).is_none() {
                return Err(IrError::UnsupportedAttr {
                    node: node.id.clone(),
                    attr: attr::ANGLE.into(),
                    reason: "rotate needs an angle in radians".into(),
                });
            }
            f32(inputs[0].to_vec())
        }
        Inverse => {
            let s = inputs[0];
            if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
                return Err(err(
                    node,
                    format!("inverse needs square trailing matrices, got {s:?}"),
                ));
            }
            f32(s.to_vec())
        }
        ModulatedDeformConv2d => {
            let (x, off, mask, w) = (inputs[0], inputs[1], inputs[2], inputs[3]);
            let out = conv_shape(node, x, w)?;
            let taps = w[2] * w[3];
            let (n, ho, wo) = (out[0], out[2], out[3]);
            if off != [n, 2 * taps, ho, wo] || mask != [n, taps, ho, wo] {
                return Err(err(
                    node,
                    format!(
                        "offset/mask must be [{n},{},{ho},{wo}] and [{n},{taps},{ho},{wo}]",
                        2 * taps
                    ),
                ));
            }
            f32(out)
        }
        FusedConvAdd => {
            let c = conv_shape(node, inputs[0], inputs[1])?;
            f32(need_broadcast(node, &c, inputs[2])?)
        }
        FusedMatMulAdd => {
            let m = need_matmul(node, inputs[0], inputs[1])?;
            f32(need_broadcast(node, &m, inputs[2])?)
        }
        FusedMHA => {
            let (q, k, v) = if node.flag(attr::PROJECTED) {
                (
                    need_matmul(node, inputs[0], inputs[1])?,
                    need_matmul(node, inputs[2], inputs[3])?,
                    need_matmul(node, inputs[4], inputs[5])?,
                )
            } else {
                (inputs[0].to_vec(), inputs[1].to_vec(), inputs[2].to_vec())
            };
            if k.len() < 2 {
                return Err(err(node, "attention key needs rank >= 2"));
            }
            let kt = if node.flag(attr::TRANSPOSE_K) {
                swap_last_two(&k)
            } else {
                k
            };
            let scores = need_matmul(node, &q, &kt)?;
            f32(need_matmul(node, &scores, &v)?)
        }
        FusedMSDA => {
            let per = if node.flag(attr::PROJECTED) { 4 } else { 3 };
            let mut acc: Option<Vec<usize>> = None;
            for branch in inputs.chunks(per) {
                let grid = if per == 4 {
                    need_matmul(node, branch[1], branch[2])?
                } else {
                    branch[1].to_vec()
                };
                let sampled = grid_sample_shape(node, branch[0], &grid)?;
                let weighted = need_broadcast(node, &sampled, branch[per - 1])?;
                acc = Some(match acc {
                    None => weighted,
                    Some(a) => need_broadcast(node, &a, &weighted)?,
                });
            }
            f32(acc.ok_or_else(|| err(node, "no branches"))?)
        }
        Quantize => {
            for key in [attr::SCALE, attr::ZERO_POINT, attr::Q_MIN, attr::Q_MAX] {
                if node.attr_float(key).is_none() {
                    return Err(IrError::UnsupportedAttr {
                        node: node.id.clone(),
                        attr: key.into(),
                        reason: "quantize needs scale, zero_point, q_min and q_max".into(),
                    });
                }
            }
            Ok((DType::I8, inputs[0].to_vec()))
        }
        Dequantize => {
            if node.attr_float(attr::SCALE).is_none() {
                return Err(IrError::UnsupportedAttr {
                    node: node.id.clone(),
                    attr: attr::SCALE.into(),
                    reason: "dequantize needs a scale".into(),
                });
            }
            f32(inputs[0].to_vec())
        }
    }
}
