//! Raw numeric kernels shared by the forward and backward passes.

use super::{Tensor, TensorError};
use crate::Real;

/// Result shape of broadcasting two shapes together (numpy rules,
/// right-aligned). Returns None when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Strides of `shape` viewed as `out_rank`-dimensional with broadcast
/// (stride 0) on size-1 and missing leading axes.
fn broadcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let own = strides(shape);
    let offset = out_rank - shape.len();
    let mut s = vec![0usize; out_rank];
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_zip(
    a: &Tensor,
    b: &Tensor,
    context: &'static str,
    f: impl Fn(Real, Real) -> Real,
) -> Result<Tensor, TensorError> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or(TensorError::ShapeMismatch {
        context,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    // Fast path: identical shapes.
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out_shape, data);
    }
    let rank = out_shape.len();
    let sa = broadcast_strides(a.shape(), rank);
    let sb = broadcast_strides(b.shape(), rank);
    let numel: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let (mut off_a, mut off_b) = (0usize, 0usize);
    for _ in 0..numel {
        data.push(f(a.data()[off_a], b.data()[off_b]));
        // Odometer increment.
        for d in (0..rank).rev() {
            idx[d] += 1;
            off_a += sa[d];
            off_b += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off_a -= sa[d] * out_shape[d];
            off_b -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data)
}

/// Sum `grad` down to `target` shape, inverting a broadcast.
pub fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let rank = grad.rank();
    let st = broadcast_strides(target, rank);
    let numel_t: usize = target.iter().product();
    let mut out = vec![0.0; numel_t];
    let shape = grad.shape();
    let mut idx = vec![0usize; rank];
    let mut off_t = 0usize;
    for &g in grad.data() {
        out[off_t] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            off_t += st[d];
            if idx[d] < shape[d] {
                break;
            }
            off_t -= st[d] * shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(target.to_vec(), out).expect("reduce_to_shape: length invariant")
}

/// C = A @ B for 2D row-major blocks, accumulating into `c`.
/// a: m*k, b: k*n, c: m*n.
pub fn matmul_accum(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C = A^T @ B, a: k*m, b: k*n, c: m*n (accumulating).
pub fn matmul_at_b_accum(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C = A @ B^T, a: m*k, b: n*k, c: m*n (accumulating).
pub fn matmul_a_bt_accum(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

pub struct Conv2dDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
}

/// Valid kernel-offset window per output position: `k` in [lo, hi) keeps
/// `o*stride + k - pad` inside [0, len).
fn kernel_ranges(out_len: usize, k_len: usize, len: usize, stride: usize, pad: usize) -> Vec<(usize, usize)> {
    (0..out_len)
        .map(|o| {
            let start = o * stride;
            let lo = pad.saturating_sub(start);
            let hi = if len + pad > start { (len + pad - start).min(k_len) } else { lo };
            (lo, hi.max(lo))
        })
        .collect()
}

/// Row span such that `ox + kx - pad` stays inside [0, w) for stride-1
/// output positions ox in [lo, hi).
fn stride1_span(kx: usize, w: usize, ow: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = if w + pad > kx { ow.min(w + pad - kx) } else { lo };
    (lo, hi.max(lo))
}

/// Direct 2D convolution (cross-correlation), x: [C,H,W], w: [O,C,kh,kw],
/// bias: [O] optional. Output [O,H',W'].
///
/// Stride-1 convolutions take a shift-and-accumulate path whose inner loop
/// is a full-row multiply-add; other strides fall back to the generic
/// per-pixel loop.
pub fn conv2d_forward(x: &[Real], w: &[Real], bias: Option<&[Real]>, d: &Conv2dDims) -> Vec<Real> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![0.0; d.c_out * oh * ow];
    if let Some(b) = bias {
        for co in 0..d.c_out {
            out[co * oh * ow..(co + 1) * oh * ow].fill(b[co]);
        }
    }
    if d.stride == 1 {
        for co in 0..d.c_out {
            let obase = co * oh * ow;
            for ci in 0..d.c_in {
                let xbase = ci * d.h * d.w;
                let kbase = (co * d.c_in + ci) * d.kh * d.kw;
                for ky in 0..d.kh {
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < d.pad || iy >= d.h + d.pad {
                            continue;
                        }
                        let iy = iy - d.pad;
                        let xrow = &x[xbase + iy * d.w..xbase + (iy + 1) * d.w];
                        let orow = &mut out[obase + oy * ow..obase + (oy + 1) * ow];
                        for kx in 0..d.kw {
                            let kv = w[kbase + ky * d.kw + kx];
                            let (lo, hi) = stride1_span(kx, d.w, ow, d.pad);
                            let src = &xrow[lo + kx - d.pad..hi + kx - d.pad];
                            for (o, &xv) in orow[lo..hi].iter_mut().zip(src) {
                                *o += kv * xv;
                            }
                        }
                    }
                }
            }
        }
        return out;
    }
    let ky_ranges = kernel_ranges(oh, d.kh, d.h, d.stride, d.pad);
    let kx_ranges = kernel_ranges(ow, d.kw, d.w, d.stride, d.pad);
    for co in 0..d.c_out {
        let wbase = co * d.c_in * d.kh * d.kw;
        let obase = co * oh * ow;
        for oy in 0..oh {
            let (ky_lo, ky_hi) = ky_ranges[oy];
            let iy0 = oy * d.stride;
            for ox in 0..ow {
                let (kx_lo, kx_hi) = kx_ranges[ox];
                let ix0 = ox * d.stride;
                let mut acc = 0.0;
                for ci in 0..d.c_in {
                    let xbase = ci * d.h * d.w;
                    let kbase = wbase + ci * d.kh * d.kw;
                    for ky in ky_lo..ky_hi {
                        let iy = iy0 + ky - d.pad;
                        let xrow = &x[xbase + iy * d.w + ix0 + kx_lo - d.pad
                            ..xbase + iy * d.w + ix0 + kx_hi - d.pad];
                        let krow = &w[kbase + ky * d.kw + kx_lo..kbase + ky * d.kw + kx_hi];
                        for (&kv, &xv) in krow.iter().zip(xrow) {
                            acc += kv * xv;
                        }
                    }
                }
                out[obase + oy * ow + ox] += acc;
            }
        }
    }
    out
}

/// Gradient of conv2d w.r.t. its input.
pub fn conv2d_backward_input(grad_out: &[Real], w: &[Real], d: &Conv2dDims) -> Vec<Real> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut gx = vec![0.0; d.c_in * d.h * d.w];
    if d.stride == 1 {
        for co in 0..d.c_out {
            let obase = co * oh * ow;
            for ci in 0..d.c_in {
                let xbase = ci * d.h * d.w;
                let kbase = (co * d.c_in + ci) * d.kh * d.kw;
                for ky in 0..d.kh {
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < d.pad || iy >= d.h + d.pad {
                            continue;
                        }
                        let iy = iy - d.pad;
                        let grow = &grad_out[obase + oy * ow..obase + (oy + 1) * ow];
                        let xrow = &mut gx[xbase + iy * d.w..xbase + (iy + 1) * d.w];
                        for kx in 0..d.kw {
                            let kv = w[kbase + ky * d.kw + kx];
                            let (lo, hi) = stride1_span(kx, d.w, ow, d.pad);
                            let dst = &mut xrow[lo + kx - d.pad..hi + kx - d.pad];
                            for (xv, &gv) in dst.iter_mut().zip(&grow[lo..hi]) {
                                *xv += kv * gv;
                            }
                        }
                    }
                }
            }
        }
        return gx;
    }
    let ky_ranges = kernel_ranges(oh, d.kh, d.h, d.stride, d.pad);
    let kx_ranges = kernel_ranges(ow, d.kw, d.w, d.stride, d.pad);
    for co in 0..d.c_out {
        let wbase = co * d.c_in * d.kh * d.kw;
        let obase = co * oh * ow;
        for oy in 0..oh {
            let (ky_lo, ky_hi) = ky_ranges[oy];
            let iy0 = oy * d.stride;
            for ox in 0..ow {
                let (kx_lo, kx_hi) = kx_ranges[ox];
                let ix0 = ox * d.stride;
                let g = grad_out[obase + oy * ow + ox];
                for ci in 0..d.c_in {
                    let xbase = ci * d.h * d.w;
                    let kbase = wbase + ci * d.kh * d.kw;
                    for ky in ky_lo..ky_hi {
                        let iy = iy0 + ky - d.pad;
                        let grow = &mut gx[xbase + iy * d.w + ix0 + kx_lo - d.pad
                            ..xbase + iy * d.w + ix0 + kx_hi - d.pad];
                        let krow = &w[kbase + ky * d.kw + kx_lo..kbase + ky * d.kw + kx_hi];
                        for (gv, &kv) in grow.iter_mut().zip(krow) {
                            *gv += g * kv;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient of conv2d w.r.t. its weights (and bias when present).
pub fn conv2d_backward_weight(
    grad_out: &[Real],
    x: &[Real],
    d: &Conv2dDims,
) -> (Vec<Real>, Vec<Real>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut gw = vec![0.0; d.c_out * d.c_in * d.kh * d.kw];
    let mut gb = vec![0.0; d.c_out];
    for co in 0..d.c_out {
        let obase = co * oh * ow;
        for g in &grad_out[obase..obase + oh * ow] {
            gb[co] += g;
        }
    }
    if d.stride == 1 {
        for co in 0..d.c_out {
            let obase = co * oh * ow;
            for ci in 0..d.c_in {
                let xbase = ci * d.h * d.w;
                let kbase = (co * d.c_in + ci) * d.kh * d.kw;
                for ky in 0..d.kh {
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < d.pad || iy >= d.h + d.pad {
                            continue;
                        }
                        let iy = iy - d.pad;
                        let grow = &grad_out[obase + oy * ow..obase + (oy + 1) * ow];
                        let xrow = &x[xbase + iy * d.w..xbase + (iy + 1) * d.w];
                        for kx in 0..d.kw {
                            let (lo, hi) = stride1_span(kx, d.w, ow, d.pad);
                            let mut acc = 0.0;
                            for (&gv, &xv) in
                                grow[lo..hi].iter().zip(&xrow[lo + kx - d.pad..hi + kx - d.pad])
                            {
                                acc += gv * xv;
                            }
                            gw[kbase + ky * d.kw + kx] += acc;
                        }
                    }
                }
            }
        }
        return (gw, gb);
    }
    let ky_ranges = kernel_ranges(oh, d.kh, d.h, d.stride, d.pad);
    let kx_ranges = kernel_ranges(ow, d.kw, d.w, d.stride, d.pad);
    for co in 0..d.c_out {
        let wbase = co * d.c_in * d.kh * d.kw;
        let obase = co * oh * ow;
        for oy in 0..oh {
            let (ky_lo, ky_hi) = ky_ranges[oy];
            let iy0 = oy * d.stride;
            for ox in 0..ow {
                let (kx_lo, kx_hi) = kx_ranges[ox];
                let ix0 = ox * d.stride;
                let g = grad_out[obase + oy * ow + ox];
                for ci in 0..d.c_in {
                    let xbase = ci * d.h * d.w;
                    let kbase = wbase + ci * d.kh * d.kw;
                    for ky in ky_lo..ky_hi {
                        let iy = iy0 + ky - d.pad;
                        let xrow = &x[xbase + iy * d.w + ix0 + kx_lo - d.pad
                            ..xbase + iy * d.w + ix0 + kx_hi - d.pad];
                        let grow = &mut gw[kbase + ky * d.kw + kx_lo..kbase + ky * d.kw + kx_hi];
                        for (wv, &xv) in grow.iter_mut().zip(xrow) {
                            *wv += g * xv;
                        }
                    }
                }
            }
        }
    }
    (gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[3, 1], &[1, 4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
    }

    #[test]
    fn reduce_inverts_broadcast() {
        let g = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = reduce_to_shape(&g, &[3]);
        assert_eq!(r.data(), &[5.0, 7.0, 9.0]);
        let r2 = reduce_to_shape(&g, &[2, 1]);
        assert_eq!(r2.data(), &[6.0, 15.0]);
    }

    #[test]
    fn matmul_against_triple_loop() {
        let mut rng = crate::rng::Rng::new(99);
        let (m, k, n) = (3, 4, 2);
        let a: Vec<Real> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<Real> = (0..k * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut c = vec![0.0; m * n];
        matmul_accum(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0;
                for p in 0..k {
                    want += a[i * k + p] * b[p * n + j];
                }
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 identity kernel reproduces the input.
        let x: Vec<Real> = (0..9).map(|i| i as Real).collect();
        let d = Conv2dDims { c_in: 1, c_out: 1, h: 3, w: 3, kh: 1, kw: 1, stride: 1, pad: 0 };
        let out = conv2d_forward(&x, &[1.0], None, &d);
        assert_eq!(out, x);
    }
}
