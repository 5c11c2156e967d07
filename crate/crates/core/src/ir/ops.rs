//! Reference kernels. Plain loops over `f64`, written for clarity over speed;
//! fused kernels are composed from the same primitives so that fusion never
//! changes the order of floating-point operations.

use super::shape::{matmul_shape, swap_last_two};
use super::tensor::{broadcast_binary, broadcast_offset, for_each_index, strides, Tensor};

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Option<Tensor> {
    let out_shape = matmul_shape(&a.shape, &b.shape)?;
    let r = out_shape.len();
    let (m, n) = (out_shape[r - 2], out_shape[r - 1]);
    let k = a.shape[a.rank() - 1];
    let batch = &out_shape[..r - 2];
    let a_batch = &a.shape[..a.rank() - 2];
    let b_batch = &b.shape[..b.rank() - 2];
    let (sa, sb) = (strides(a_batch), strides(b_batch));
    let mut out = vec![0.0; out_shape.iter().product()];
    let mut chunk = 0;
    for_each_index(batch, |idx| {
        let ao = broadcast_offset(idx, a_batch, &sa) * m * k;
        let bo = broadcast_offset(idx, b_batch, &sb) * k * n;
        let oo = chunk * m * n;
        for i in 0..m {
            let row = &mut out[oo + i * n..oo + (i + 1) * n];
            for p in 0..k {
                let av = a.data[ao + i * k + p];
                let brow = &b.data[bo + p * n..bo + (p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        chunk += 1;
    });
    Some(Tensor {
        shape: out_shape,
        data: out,
    })
}

pub(crate) fn add(a: &Tensor, b: &Tensor) -> Option<Tensor> {
    broadcast_binary(a, b, |x, y| x + y)
}

pub(crate) fn mul(a: &Tensor, b: &Tensor) -> Option<Tensor> {
    broadcast_binary(a, b, |x, y| x * y)
}

pub(crate) fn conv2d(
    x: &Tensor,
    w: &Tensor,
    stride: [usize; 2],
    pad: [usize; 2],
    out_hw: (usize, usize),
) -> Tensor {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
    let (ho, wo) = out_hw;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride[0] + ky) as isize - pad[0] as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride[1] + kx) as isize - pad[1] as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv =
                                    x.data[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * co + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor {
        shape: vec![n, co, ho, wo],
        data: out,
    }
}

pub(crate) fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let dim = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |d: usize| (o * dim + d) * inner + i;
            let max = (0..dim)
                .map(|d| x.data[at(d)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for d in 0..dim {
                let e = (x.data[at(d)] - max).exp();
                out[at(d)] = e;
                sum += e;
            }
            for d in 0..dim {
                out[at(d)] /= sum;
            }
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

pub(crate) fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let d = *x.shape.last().unwrap();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, v) in row.iter().enumerate() {
            out.push((v - mean) * inv * gamma.data[j] + beta.data[j]);
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

pub(crate) fn transpose(x: &Tensor, perm: &[usize]) -> Tensor {
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let src_strides = strides(&x.shape);
    let mut data = Vec::with_capacity(x.numel());
    for_each_index(&out_shape, |idx| {
        let off: usize = idx
            .iter()
            .zip(perm)
            .map(|(&i, &p)| i * src_strides[p])
            .sum();
        data.push(x.data[off]);
    });
    Tensor {
        shape: out_shape,
        data,
    }
}

pub(crate) fn transpose_last_two(x: &Tensor) -> Tensor {
    let r = x.rank();
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 2, r - 1);
    let t = transpose(x, &perm);
    debug_assert_eq!(t.shape, swap_last_two(&x.shape));
    t
}

/// Bilinear sample of one `h x w` plane; `None` padding clamps to the border,
/// `Some(0.0)` treats out-of-range corners as zero.
fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64, zero_pad: bool) -> f64 {
    if zero_pad {
        if y <= -1.0 || y >= h as f64 || x <= -1.0 || x >= w as f64 {
            return 0.0;
        }
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let at = |yy: isize, xx: isize| {
            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                0.0
            } else {
                plane[yy as usize * w + xx as usize]
            }
        };
        return at(y0, x0) * (1.0 - fy) * (1.0 - fx)
            + at(y0, x0 + 1) * (1.0 - fy) * fx
            + at(y0 + 1, x0) * fy * (1.0 - fx)
            + at(y0 + 1, x0 + 1) * fy * fx;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    plane[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
        + plane[y0 * w + x1] * (1.0 - fy) * fx
        + plane[y1 * w + x0] * fy * (1.0 - fx)
        + plane[y1 * w + x1] * fy * fx
}

/// Bilinear grid sampling with border padding. Grid coordinates are `(x, y)`
/// pairs in `[-1, 1]` with corners aligned to pixel centres.
pub(crate) fn grid_sample(x: &Tensor, grid: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (ho, wo) = (grid.shape[1], grid.shape[2]);
    let mut out = vec![0.0; n * c * ho * wo];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = ((b * ho + oy) * wo + ox) * 2;
                let px = (grid.data[g] + 1.0) * 0.5 * (w - 1) as f64;
                let py = (grid.data[g + 1] + 1.0) * 0.5 * (h - 1) as f64;
                for ch in 0..c {
                    let plane = &x.data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    out[((b * c + ch) * ho + oy) * wo + ox] = bilinear(plane, h, w, py, px, false);
                }
            }
        }
    }
    Tensor {
        shape: vec![n, c, ho, wo],
        data: out,
    }
}

/// Rotate every trailing `h x w` plane about its centre by `angle` radians
/// (counter-clockwise), bilinear with border padding.
pub(crate) fn rotate(x: &Tensor, angle: f64) -> Tensor {
    let r = x.rank();
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = Vec::with_capacity(x.numel());
    for plane in x.data.chunks(h * w) {
        for i in 0..h {
            for j in 0..w {
                let (dx, dy) = (j as f64 - cx, i as f64 - cy);
                let sx = cos * dx + sin * dy + cx;
                let sy = -sin * dx + cos * dy + cy;
                out.push(bilinear(plane, h, w, sy, sx, false));
            }
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

/// Batched inverse of the trailing square matrices (Gauss-Jordan with
/// partial pivoting). Returns `None` for a singular matrix.
pub(crate) fn inverse(x: &Tensor) -> Option<Tensor> {
    let n = x.shape[x.rank() - 1];
    let mut out = Vec::with_capacity(x.numel());
    for m in x.data.chunks(n * n) {
        let mut a = m.to_vec();
        let mut inv: Vec<f64> = (0..n * n)
            .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
            .collect();
        for col in 0..n {
            let pivot =
                (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
            if a[pivot * n + col].abs() < 1e-12 {
                return None;
            }
            if pivot != col {
                for k in 0..n {
                    a.swap(pivot * n + k, col * n + k);
                    inv.swap(pivot * n + k, col * n + k);
                }
            }
            let d = a[col * n + col];
            for k in 0..n {
                a[col * n + k] /= d;
                inv[col * n + k] /= d;
            }
            for row in 0..n {
                if row == col {
                    continue;
                }
                let f = a[row * n + col];
                if f == 0.0 {
                    continue;
                }
                for k in 0..n {
                    a[row * n + k] -= f * a[col * n + k];
                    inv[row * n + k] -= f * inv[col * n + k];
                }
            }
        }
        out.extend(inv);
    }
    Some(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Modulated deformable convolution: every kernel tap samples the input at
/// its regular position plus a learned offset (bilinear, zero outside) and is
/// weighted by a modulation mask before the usual weight contraction.
pub(crate) fn deform_conv2d(
    x: &Tensor,
    offset: &Tensor,
    mask: &Tensor,
    w: &Tensor,
    stride: [usize; 2],
    pad: [usize; 2],
    out_hw: (usize, usize),
) -> Tensor {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
    let (ho, wo) = out_hw;
    let taps = kh * kw;
    let pix = ho * wo;
    let mut out = vec![0.0; n * co * pix];
    for b in 0..n {
        // columns[(ic * taps + t) * pix + p]
        let mut columns = vec![0.0; c * taps * pix];
        for oy in 0..ho {
            for ox in 0..wo {
                let p = oy * wo + ox;
                for t in 0..taps {
                    let (ky, kx) = (t / kw, t % kw);
                    let dy = offset.data[((b * 2 * taps + 2 * t) * ho + oy) * wo + ox];
                    let dx = offset.data[((b * 2 * taps + 2 * t + 1) * ho + oy) * wo + ox];
                    let m = mask.data[((b * taps + t) * ho + oy) * wo + ox];
                    let sy = (oy * stride[0] + ky) as f64 - pad[0] as f64 + dy;
                    let sx = (ox * stride[1] + kx) as f64 - pad[1] as f64 + dx;
                    for ic in 0..c {
                        let plane = &x.data[(b * c + ic) * h * wd..(b * c + ic + 1) * h * wd];
                        columns[(ic * taps + t) * pix + p] =
                            bilinear(plane, h, wd, sy, sx, true) * m;
                    }
                }
            }
        }
        for oc in 0..co {
            for p in 0..pix {
                let mut acc = 0.0;
                for ic in 0..c {
                    for t in 0..taps {
                        acc +=
                            w.data[(oc * c + ic) * taps + t] * columns[(ic * taps + t) * pix + p];
                    }
                }
                out[(b * co + oc) * pix + p] = acc;
            }
        }
    }
    Tensor {
        shape: vec![n, co, ho, wo],
        data: out,
    }
}

/// Scaled dot-product attention built from the primitive kernels:
/// `softmax((q @ kt) * scale) @ v`.
pub(crate) fn attention(q: &Tensor, kt: &Tensor, v: &Tensor, scale: f64) -> Option<Tensor> {
    let scores = matmul(q, kt)?.map(|s| s * scale);
    let axis = scores.rank() - 1;
    matmul(&softmax(&scores, axis), v)
}
