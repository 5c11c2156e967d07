//! Dense row-major tensors used by the interpreter, constants and calibration.

use serde::{Deserialize, Serialize};

use super::IrError;

/// A dense, row-major tensor. Values are held in `f64` regardless of the
/// declared dtype; int8 tensors hold integral values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, IrError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(IrError::Shape(format!(
                "tensor of shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Round every value through `f32`, the storage precision of graph outputs.
    pub fn to_f32_precision(&self) -> Self {
        self.map(|v| v as f32 as f64)
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        let mut it = self.data.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat index into `src_shape` for a multi-index over the broadcast `out_shape`.
pub(crate) fn broadcast_offset(
    index: &[usize],
    src_shape: &[usize],
    src_strides: &[usize],
) -> usize {
    let skip = index.len() - src_shape.len();
    src_shape
        .iter()
        .zip(src_strides)
        .zip(&index[skip..])
        .map(|((&dim, &stride), &i)| if dim == 1 { 0 } else { i * stride })
        .sum()
}

/// Iterate over every multi-index of `shape` in row-major order.
pub(crate) fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let mut index = vec![0; shape.len()];
    for _ in 0..numel {
        f(&index);
        for d in (0..shape.len()).rev() {
            index[d] += 1;
            if index[d] < shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_binary(a: &Tensor, b: &Tensor, op: impl Fn(f64, f64) -> f64) -> Option<Tensor> {
    let shape = broadcast_shapes(&a.shape, &b.shape)?;
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| op(x, y))
            .collect();
        return Some(Tensor { shape, data });
    }
    let (sa, sb) = (strides(&a.shape), strides(&b.shape));
    let mut data = Vec::with_capacity(shape.iter().product());
    for_each_index(&shape, |idx| {
        let x = a.data[broadcast_offset(idx, &a.shape, &sa)];
        let y = b.data[broadcast_offset(idx, &b.shape, &sb)];
        data.push(op(x, y));
    });
    Some(Tensor { shape, data })
}
