//! Recording tape for reverse-mode differentiation.
//!
//! Every operation pushes a node holding its forward value and the recipe
//! for its vector-Jacobian product. Tape order is construction order, which
//! is topological by definition, so the backward pass is a single reverse
//! sweep. A tape is confined to one thread; tensors themselves are plain
//! data and can be shared freely.

use super::kernels::{
    broadcast_zip, conv2d_backward_input, conv2d_backward_weight, conv2d_forward, matmul_a_bt_accum,
    matmul_accum, matmul_at_b_accum, reduce_to_shape, Conv2dDims,
};
use super::{Tensor, TensorError};
use crate::Real;
use std::cell::RefCell;
use std::sync::Arc;

/// Signed scatter plan: `out[i] = sign * src[j]` for `Some((j, sign))`,
/// zero for `None`. Shared between tapes via `Arc`.
pub type ScatterMap = Arc<Vec<Option<(usize, Real)>>>;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, Real),
    Matmul(usize, usize),
    Conv2d { x: usize, w: usize, bias: Option<usize>, c_in: usize, c_out: usize, h: usize, w_dim: usize, kh: usize, kw: usize, stride: usize, pad: usize },
    AvgPool2d { x: usize, k: usize, stride: usize, channels: usize, h: usize, w: usize },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    Relu(usize),
    Gelu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, inv_std: Vec<Real> },
    Reshape(usize),
    Permute { x: usize, axes: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, ranges: Vec<(usize, usize)> },
    SumAll(usize),
    MeanAll(usize),
    SumAxis { x: usize, axis: usize },
    MeanAxis { x: usize, axis: usize },
    Sin(usize),
    Cos(usize),
    Atan2 { y: usize, x: usize },
    Sqrt(usize),
    Log(usize),
    Exp(usize),
    Abs(usize),
    Clip { x: usize, lo: Real, hi: Real },
    GatherSigned { x: usize, map: ScatterMap },
    Patchify { x: usize, patch: usize, c: usize, h: usize, w: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Create one per forward/backward episode.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, zeros when no gradient flowed to it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Register a non-differentiable constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Clone of the forward value of `v`.
    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.idx].value.clone()
    }

    /// Scalar forward value of `v`.
    pub fn scalar_value(&self, v: Var<'_>) -> Result<Real, TensorError> {
        self.nodes.borrow()[v.idx].value.item()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    /// Reverse sweep from a scalar root. Returns the gradient map over all
    /// nodes recorded so far.
    pub fn backward(&self, root: Var<'_>) -> Result<GradMap, TensorError> {
        let nodes = self.nodes.borrow();
        let root_numel = nodes[root.idx].value.numel();
        if root_numel != 1 {
            return Err(TensorError::NotScalar { numel: root_numel });
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.idx] = Some(Tensor::full(nodes[root.idx].value.shape(), 1.0));

        for idx in (0..=root.idx).rev() {
            if !nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(&nodes, idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(GradMap { grads })
    }

    fn backward_node(
        &self,
        nodes: &[Node],
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        let val = |i: usize| -> &Tensor { &nodes[i].value };
        let needs = |i: usize| -> bool { nodes[i].requires_grad };
        let accum = |i: usize, add: Tensor, grads: &mut [Option<Tensor>]| {
            match &mut grads[i] {
                Some(acc) => {
                    debug_assert_eq!(acc.shape(), add.shape());
                    for (a, b) in acc.data_mut().iter_mut().zip(add.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(add),
            }
        };

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    accum(*a, reduce_to_shape(g, val(*a).shape()), grads);
                }
                if needs(*b) {
                    accum(*b, reduce_to_shape(g, val(*b).shape()), grads);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accum(*a, reduce_to_shape(g, val(*a).shape()), grads);
                }
                if needs(*b) {
                    let neg = g.map(|x| -x);
                    accum(*b, reduce_to_shape(&neg, val(*b).shape()), grads);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let t = broadcast_zip(g, val(*b), "mul backward", |g, b| g * b)?;
                    accum(*a, reduce_to_shape(&t, val(*a).shape()), grads);
                }
                if needs(*b) {
                    let t = broadcast_zip(g, val(*a), "mul backward", |g, a| g * a)?;
                    accum(*b, reduce_to_shape(&t, val(*b).shape()), grads);
                }
            }
            Op::Div(a, b) => {
                if needs(*a) {
                    let t = broadcast_zip(g, val(*b), "div backward", |g, b| g / b)?;
                    accum(*a, reduce_to_shape(&t, val(*a).shape()), grads);
                }
                if needs(*b) {
                    let coeff = broadcast_zip(val(*a), val(*b), "div backward", |a, b| -a / (b * b))?;
                    let t = broadcast_zip(g, &coeff, "div backward", |g, c| g * c)?;
                    accum(*b, reduce_to_shape(&t, val(*b).shape()), grads);
                }
            }
            Op::AddScalar(a) => {
                if needs(*a) {
                    accum(*a, g.clone(), grads);
                }
            }
            Op::MulScalar(a, s) => {
                if needs(*a) {
                    let s = *s;
                    accum(*a, g.map(|x| x * s), grads);
                }
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n, batches) = matmul_dims(av.shape(), bv.shape()).expect("validated at forward");
                if needs(*a) {
                    let mut ga = vec![0.0; batches * m * k];
                    for t in 0..batches {
                        matmul_a_bt_accum(
                            &g.data()[t * m * n..(t + 1) * m * n],
                            &bv.data()[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    accum(*a, Tensor::new(av.shape().to_vec(), ga)?, grads);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; batches * k * n];
                    for t in 0..batches {
                        matmul_at_b_accum(
                            &av.data()[t * m * k..(t + 1) * m * k],
                            &g.data()[t * m * n..(t + 1) * m * n],
                            &mut gb[t * k * n..(t + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    accum(*b, Tensor::new(bv.shape().to_vec(), gb)?, grads);
                }
            }
            Op::Conv2d { x, w, bias, c_in, c_out, h, w_dim, kh, kw, stride, pad } => {
                let dims = Conv2dDims {
                    c_in: *c_in,
                    c_out: *c_out,
                    h: *h,
                    w: *w_dim,
                    kh: *kh,
                    kw: *kw,
                    stride: *stride,
                    pad: *pad,
                };
                if needs(*x) {
                    let gx = conv2d_backward_input(g.data(), val(*w).data(), &dims);
                    accum(*x, Tensor::new(val(*x).shape().to_vec(), gx)?, grads);
                }
                if needs(*w) || bias.map(needs).unwrap_or(false) {
                    let (gw, gb) = conv2d_backward_weight(g.data(), val(*x).data(), &dims);
                    if needs(*w) {
                        accum(*w, Tensor::new(val(*w).shape().to_vec(), gw)?, grads);
                    }
                    if let Some(b) = bias {
                        if needs(*b) {
                            accum(*b, Tensor::new(vec![*c_out], gb)?, grads);
                        }
                    }
                }
            }
            Op::AvgPool2d { x, k, stride, channels, h, w } => {
                if needs(*x) {
                    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
                    let mut gx = vec![0.0; channels * h * w];
                    let inv = 1.0 / (*k * *k) as Real;
                    for c in 0..*channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g.data()[(c * oh + oy) * ow + ox] * inv;
                                for dy in 0..*k {
                                    for dx in 0..*k {
                                        gx[(c * h + oy * stride + dy) * w + ox * stride + dx] += gv;
                                    }
                                }
                            }
                        }
                    }
                    accum(*x, Tensor::new(val(*x).shape().to_vec(), gx)?, grads);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if needs(*x) {
                    let mut gx = vec![0.0; val(*x).numel()];
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g.data()[o];
                    }
                    accum(*x, Tensor::new(val(*x).shape().to_vec(), gx)?, grads);
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let xv = val(*a);
                    let gx: Vec<Real> = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    accum(*a, Tensor::new(xv.shape().to_vec(), gx)?, grads);
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let xv = val(*a);
                    let gx: Vec<Real> = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&g, &x)| g * gelu_derivative(x))
                        .collect();
                    accum(*a, Tensor::new(xv.shape().to_vec(), gx)?, grads);
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let y = &nodes[idx].value;
                    let cols = *y.shape().last().unwrap();
                    let rows = y.numel() / cols;
                    let mut gx = vec![0.0; y.numel()];
                    for r in 0..rows {
                        let ys = &y.data()[r * cols..(r + 1) * cols];
                        let gs = &g.data()[r * cols..(r + 1) * cols];
                        let dot: Real = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                        for c in 0..cols {
                            gx[r * cols + c] = ys[c] * (gs[c] - dot);
                        }
                    }
                    accum(*a, Tensor::new(val(*a).shape().to_vec(), gx)?, grads);
                }
            }
            Op::LogSoftmax(a) => {
                if needs(*a) {
                    let y = &nodes[idx].value;
                    let cols = *y.shape().last().unwrap();
                    let rows = y.numel() / cols;
                    let mut gx = vec![0.0; y.numel()];
                    for r in 0..rows {
                        let ys = &y.data()[r * cols..(r + 1) * cols];
                        let gs = &g.data()[r * cols..(r + 1) * cols];
                        let gsum: Real = gs.iter().sum();
                        for c in 0..cols {
                            gx[r * cols + c] = gs[c] - ys[c].exp() * gsum;
                        }
                    }
                    accum(*a, Tensor::new(val(*a).shape().to_vec(), gx)?, grads);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if needs(*x) {
                    let y = &nodes[idx].value;
                    let cols = *y.shape().last().unwrap();
                    let rows = y.numel() / cols;
                    let mut gx = vec![0.0; y.numel()];
                    for r in 0..rows {
                        let ys = &y.data()[r * cols..(r + 1) * cols];
                        let gs = &g.data()[r * cols..(r + 1) * cols];
                        let mean_g: Real = gs.iter().sum::<Real>() / cols as Real;
                        let mean_gy: Real =
                            gs.iter().zip(ys).map(|(g, y)| g * y).sum::<Real>() / cols as Real;
                        for c in 0..cols {
                            gx[r * cols + c] = inv_std[r] * (gs[c] - mean_g - ys[c] * mean_gy);
                        }
                    }
                    accum(*x, Tensor::new(val(*x).shape().to_vec(), gx)?, grads);
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    accum(*a, g.reshaped(val(*a).shape().to_vec())?, grads);
                }
            }
            Op::Permute { x, axes } => {
                if needs(*x) {
                    let mut inverse = vec![0usize; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    accum(*x, permute_tensor(g, &inverse), grads);
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0usize;
                for &p in parts {
                    let part_shape = val(p).shape().to_vec();
                    let len = part_shape[*axis];
                    if needs(p) {
                        let gp = slice_axis_range(g, *axis, offset, offset + len);
                        accum(p, gp, grads);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, ranges } => {
                if needs(*x) {
                    let mut gx = Tensor::zeros(val(*x).shape());
                    scatter_slice(&mut gx, g, ranges);
                    accum(*x, gx, grads);
                }
            }
            Op::SumAll(a) => {
                if needs(*a) {
                    let gv = g.data()[0];
                    accum(*a, Tensor::full(val(*a).shape(), gv), grads);
                }
            }
            Op::MeanAll(a) => {
                if needs(*a) {
                    let n = val(*a).numel() as Real;
                    accum(*a, Tensor::full(val(*a).shape(), g.data()[0] / n), grads);
                }
            }
            Op::SumAxis { x, axis } => {
                if needs(*x) {
                    accum(*x, expand_axis(g, val(*x).shape(), *axis, 1.0), grads);
                }
            }
            Op::MeanAxis { x, axis } => {
                if needs(*x) {
                    let inv = 1.0 / val(*x).shape()[*axis] as Real;
                    accum(*x, expand_axis(g, val(*x).shape(), *axis, inv), grads);
                }
            }
            Op::Sin(a) => {
                if needs(*a) {
                    let t: Vec<Real> =
                        g.data().iter().zip(val(*a).data()).map(|(&g, &x)| g * x.cos()).collect();
                    accum(*a, Tensor::new(val(*a).shape().to_vec(), t)?, grads);
                }
            }
            Op::Cos(a) => {
                if needs(*a) {
                    let t: Vec<Real> =
                        g.data().iter().zip(val(*a).data()).map(|(&g, &x)| -g * x.sin()).collect();
                    accum(*a, Tensor::new(val(*a).shape().to_vec(), t)?, grads);
                }
            }
            Op::Atan2 { y, x } => {
                // d/dy atan2(y,x) = x/(x^2+y^2), d/dx = -y/(x^2+y^2).
                // At the origin both are defined as 0.
                let yv = val(*y);
                let xv = val(*x);
                if needs(*y) {
                    let t: Vec<Real> = g
                        .data()
                        .iter()
                        .zip(yv.data().iter().zip(xv.data()))
                        .map(|(&g, (&y, &x))| {
                            let d = x * x + y * y;
                            if d == 0.0 {
                                0.0
                            } else {
                                g * x / d
                            }
                        })
                        .collect();
                    accum(*y, Tensor::new(yv.shape().to_vec(), t)?, grads);
                }
                if needs(*x) {
                    let t: Vec<Real> = g
                        .data()
                        .iter()
                        .zip(yv.data().iter().zip(xv.data()))
                        .map(|(&g, (&y, &x))| {
                            let d = x * x + y * y;
                            if d == 0.0 {
                                0.0
                            } else {
                                -g * y / d
                            }
                        })
                        .collect();
                    accum(*x, Tensor::new(xv.shape().to_vec(), t)?, grads);
                }
            }
            Op::Sqrt(a) => {
                if needs(*a) {
                    // Subgradient 0 at x = 0 so L2 norms are usable at their minimum.
                    let y = &nodes[idx].value;
                    let t: Vec<Real> = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &y)| if y == 0.0 { 0.0 } else { g * 0.5 / y })
                        .collect();
                    accum(*a, Tensor::new(val(*a).shape().to_vec(), t)?, grads);
                }
            }
            Op::Log(a) => {
                if needs(*a) {
                    let t: Vec<Real> =
                        g.data().iter().zip(val(*a).data()).map(|(&g, &x)| g / x).collect();
                    accum(*a, Tensor::new(val(*a).shape().to_vec(), t)?, grads);
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    let y = &nodes[idx].value;
                    let t: Vec<Real> =
                        g.data().iter().zip(y.data()).map(|(&g, &y)| g * y).collect();
                    accum(*a, Tensor::new(val(*a).shape().to_vec(), t)?, grads);
                }
            }
            Op::Abs(a) => {
                if needs(*a) {
                    let t: Vec<Real> = g
                        .data()
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&g, &x)| {
                            if x > 0.0 {
                                g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accum(*a, Tensor::new(val(*a).shape().to_vec(), t)?, grads);
                }
            }
            Op::Clip { x, lo, hi } => {
                if needs(*x) {
                    // Pass-through inside [lo, hi], zero outside.
                    let t: Vec<Real> = g
                        .data()
                        .iter()
                        .zip(val(*x).data())
                        .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { 0.0 })
                        .collect();
                    accum(*x, Tensor::new(val(*x).shape().to_vec(), t)?, grads);
                }
            }
            Op::GatherSigned { x, map } => {
                if needs(*x) {
                    let mut gx = vec![0.0; val(*x).numel()];
                    for (i, entry) in map.iter().enumerate() {
                        if let Some((j, s)) = entry {
                            gx[*j] += s * g.data()[i];
                        }
                    }
                    accum(*x, Tensor::new(val(*x).shape().to_vec(), gx)?, grads);
                }
            }
            Op::Patchify { x, patch, c, h, w } => {
                if needs(*x) {
                    let mut gx = vec![0.0; val(*x).numel()];
                    patchify_scatter(g.data(), &mut gx, *patch, *c, *h, *w);
                    accum(*x, Tensor::new(val(*x).shape().to_vec(), gx)?, grads);
                }
            }
        }
        Ok(())
    }
}

fn gelu_forward(x: Real) -> Real {
    const C: Real = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_derivative(x: Real) -> Real {
    const C: Real = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// (m, k, n, batches) for 2D or batched 3D matmul operands.
fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => Some((a[0], a[1], b[1], 1)),
        (3, 3) if a[0] == b[0] && a[2] == b[1] => Some((a[1], a[2], b[2], a[0])),
        _ => None,
    }
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = t.numel();
    let mut data = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        data.push(t.data()[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += mapped[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= mapped[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permute: length invariant")
}

/// Extract `lo..hi` along `axis` (full range elsewhere).
fn slice_axis_range(t: &Tensor, axis: usize, lo: usize, hi: usize) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = hi - lo;
    let mut data = Vec::with_capacity(outer * (hi - lo) * inner);
    for o in 0..outer {
        let base = (o * axis_len + lo) * inner;
        data.extend_from_slice(&t.data()[base..base + (hi - lo) * inner]);
    }
    Tensor::new(out_shape, data).expect("slice_axis_range: length invariant")
}

/// Add `src` into the window of `dst` described by per-axis `ranges`.
fn scatter_slice(dst: &mut Tensor, src: &Tensor, ranges: &[(usize, usize)]) {
    let rank = ranges.len();
    let dst_shape = dst.shape().to_vec();
    let mut dst_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        dst_strides[i] = dst_strides[i + 1] * dst_shape[i + 1];
    }
    let src_shape: Vec<usize> = ranges.iter().map(|(a, b)| b - a).collect();
    let numel: usize = src_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut off: usize = ranges.iter().zip(&dst_strides).map(|((a, _), s)| a * s).sum();
    let dd = dst.data_mut();
    for i in 0..numel {
        dd[off] += src.data()[i];
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += dst_strides[d];
            if idx[d] < src_shape[d] {
                break;
            }
            off -= dst_strides[d] * src_shape[d];
            idx[d] = 0;
        }
    }
}

fn expand_axis(g: &Tensor, target: &[usize], axis: usize, scale: Real) -> Tensor {
    let outer: usize = target[..axis].iter().product();
    let axis_len = target[axis];
    let inner: usize = target[axis + 1..].iter().product();
    let mut data = vec![0.0; outer * axis_len * inner];
    for o in 0..outer {
        for a in 0..axis_len {
            for i in 0..inner {
                data[(o * axis_len + a) * inner + i] = g.data()[o * inner + i] * scale;
            }
        }
    }
    Tensor::new(target.to_vec(), data).expect("expand_axis: length invariant")
}

/// Gather [C,H,W] into [(H/p)*(W/p), C*p*p] patch rows.
fn patchify_gather(x: &[Real], out: &mut [Real], p: usize, c: usize, h: usize, w: usize) {
    let (gh, gw) = (h / p, w / p);
    let feat = c * p * p;
    for gy in 0..gh {
        for gx in 0..gw {
            let row = (gy * gw + gx) * feat;
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        out[row + (ch * p + dy) * p + dx] =
                            x[(ch * h + gy * p + dy) * w + gx * p + dx];
                    }
                }
            }
        }
    }
}

fn patchify_scatter(g: &[Real], gx: &mut [Real], p: usize, c: usize, h: usize, w: usize) {
    let (gh, gw) = (h / p, w / p);
    let feat = c * p * p;
    for gy in 0..gh {
        for gxi in 0..gw {
            let row = (gy * gw + gxi) * feat;
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        gx[(ch * h + gy * p + dy) * w + gxi * p + dx] +=
                            g[row + (ch * p + dy) * p + dx];
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Clone of this node's forward value.
    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    fn unary(self, f: impl Fn(Real) -> Real, op: impl Fn(usize) -> Op) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.idx].value.map(&f), nodes[self.idx].requires_grad)
        };
        self.tape.push(value, op(self.idx), rg)
    }

    fn binary_broadcast(
        self,
        other: Var<'t>,
        context: &'static str,
        f: impl Fn(Real, Real) -> Real,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var<'t>, TensorError> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let v = broadcast_zip(&nodes[self.idx].value, &nodes[other.idx].value, context, f)?;
            (v, nodes[self.idx].requires_grad || nodes[other.idx].requires_grad)
        };
        Ok(self.tape.push(value, op(self.idx, other.idx), rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary_broadcast(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary_broadcast(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary_broadcast(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary_broadcast(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn add_scalar(self, s: Real) -> Var<'t> {
        self.unary(|x| x + s, Op::AddScalar)
    }

    pub fn mul_scalar(self, s: Real) -> Var<'t> {
        self.unary(|x| x * s, move |a| Op::MulScalar(a, s))
    }

    pub fn neg(self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu)
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(gelu_forward, Op::Gelu)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Real::sin, Op::Sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Real::cos, Op::Cos)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Real::sqrt, Op::Sqrt)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Real::ln, Op::Log)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Real::exp, Op::Exp)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Real::abs, Op::Abs)
    }

    /// Elementwise clamp to [lo, hi]; gradient passes through inside the
    /// closed interval and is zero outside.
    pub fn clip(self, lo: Real, hi: Real) -> Var<'t> {
        self.unary(move |x| x.clamp(lo, hi), move |a| Op::Clip { x: a, lo, hi })
    }

    /// Quadrant-aware arctangent; `self` is y, `other` is x. Shapes must match.
    pub fn atan2(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let same = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.idx].value.shape() == nodes[other.idx].value.shape()
        };
        if !same {
            let nodes = self.tape.nodes.borrow();
            return Err(TensorError::ShapeMismatch {
                context: "atan2",
                lhs: nodes[self.idx].value.shape().to_vec(),
                rhs: nodes[other.idx].value.shape().to_vec(),
            });
        }
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let y = &nodes[self.idx].value;
            let x = &nodes[other.idx].value;
            let data: Vec<Real> =
                y.data().iter().zip(x.data()).map(|(&y, &x)| y.atan2(x)).collect();
            (
                Tensor::new(y.shape().to_vec(), data)?,
                nodes[self.idx].requires_grad || nodes[other.idx].requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::Atan2 { y: self.idx, x: other.idx }, rg))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            let b = &nodes[other.idx].value;
            let (m, k, n, batches) =
                matmul_dims(a.shape(), b.shape()).ok_or(TensorError::ShapeMismatch {
                    context: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })?;
            let mut out = vec![0.0; batches * m * n];
            for t in 0..batches {
                matmul_accum(
                    &a.data()[t * m * k..(t + 1) * m * k],
                    &b.data()[t * k * n..(t + 1) * k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let out_shape = if a.rank() == 3 { vec![batches, m, n] } else { vec![m, n] };
            (
                Tensor::new(out_shape, out)?,
                nodes[self.idx].requires_grad || nodes[other.idx].requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::Matmul(self.idx, other.idx), rg))
    }

    /// 2D convolution over a [C,H,W] input with [O,C,kh,kw] weights.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>, TensorError> {
        let (value, rg, dims) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let w = &nodes[weight.idx].value;
            if x.rank() != 3 || w.rank() != 4 || x.shape()[0] != w.shape()[1] {
                return Err(TensorError::ShapeMismatch {
                    context: "conv2d",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            let dims = Conv2dDims {
                c_in: x.shape()[0],
                c_out: w.shape()[0],
                h: x.shape()[1],
                w: x.shape()[2],
                kh: w.shape()[2],
                kw: w.shape()[3],
                stride,
                pad,
            };
            if dims.h + 2 * pad < dims.kh || dims.w + 2 * pad < dims.kw {
                return Err(TensorError::ShapeMismatch {
                    context: "conv2d kernel larger than padded input",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            let bias_slice = bias.map(|b| nodes[b.idx].value.data().to_vec());
            if let Some(b) = &bias_slice {
                if b.len() != dims.c_out {
                    return Err(TensorError::ShapeMismatch {
                        context: "conv2d bias",
                        lhs: vec![dims.c_out],
                        rhs: vec![b.len()],
                    });
                }
            }
            let out = conv2d_forward(x.data(), w.data(), bias_slice.as_deref(), &dims);
            let rg = nodes[self.idx].requires_grad
                || nodes[weight.idx].requires_grad
                || bias.map(|b| nodes[b.idx].requires_grad).unwrap_or(false);
            (Tensor::new(vec![dims.c_out, dims.out_h(), dims.out_w()], out)?, rg, dims)
        };
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                x: self.idx,
                w: weight.idx,
                bias: bias.map(|b| b.idx),
                c_in: dims.c_in,
                c_out: dims.c_out,
                h: dims.h,
                w_dim: dims.w,
                kh: dims.kh,
                kw: dims.kw,
                stride: dims.stride,
                pad: dims.pad,
            },
            rg,
        ))
    }

    pub fn avg_pool2d(self, k: usize, stride: usize) -> Result<Var<'t>, TensorError> {
        let (value, rg, meta) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            if x.rank() != 3 || x.shape()[1] < k || x.shape()[2] < k {
                return Err(TensorError::ShapeMismatch {
                    context: "avg_pool2d",
                    lhs: x.shape().to_vec(),
                    rhs: vec![k, k],
                });
            }
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
            let mut out = vec![0.0; c * oh * ow];
            let inv = 1.0 / (k * k) as Real;
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                acc += x.data()[(ch * h + oy * stride + dy) * w + ox * stride + dx];
                            }
                        }
                        out[(ch * oh + oy) * ow + ox] = acc * inv;
                    }
                }
            }
            (Tensor::new(vec![c, oh, ow], out)?, nodes[self.idx].requires_grad, (c, h, w))
        };
        let (c, h, w) = meta;
        Ok(self.tape.push(
            value,
            Op::AvgPool2d { x: self.idx, k, stride, channels: c, h, w },
            rg,
        ))
    }

    pub fn max_pool2d(self, k: usize, stride: usize) -> Result<Var<'t>, TensorError> {
        let (value, rg, argmax) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            if x.rank() != 3 || x.shape()[1] < k || x.shape()[2] < k {
                return Err(TensorError::ShapeMismatch {
                    context: "max_pool2d",
                    lhs: x.shape().to_vec(),
                    rhs: vec![k, k],
                });
            }
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
            let mut out = vec![0.0; c * oh * ow];
            let mut argmax = vec![0usize; c * oh * ow];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = Real::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dy in 0..k {
                            for dx in 0..k {
                                let src = (ch * h + oy * stride + dy) * w + ox * stride + dx;
                                if x.data()[src] > best {
                                    best = x.data()[src];
                                    best_idx = src;
                                }
                            }
                        }
                        out[(ch * oh + oy) * ow + ox] = best;
                        argmax[(ch * oh + oy) * ow + ox] = best_idx;
                    }
                }
            }
            (Tensor::new(vec![c, oh, ow], out)?, nodes[self.idx].requires_grad, argmax)
        };
        Ok(self.tape.push(value, Op::MaxPool2d { x: self.idx, argmax }, rg))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>, TensorError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            if x.rank() == 0 {
                return Err(TensorError::InvalidAxis { axis: 0, rank: 0 });
            }
            let cols = *x.shape().last().unwrap();
            let rows = x.numel() / cols;
            let mut out = vec![0.0; x.numel()];
            for r in 0..rows {
                let xs = &x.data()[r * cols..(r + 1) * cols];
                let max = xs.iter().fold(Real::NEG_INFINITY, |m, &v| m.max(v));
                let mut sum = 0.0;
                for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(xs) {
                    *o = (v - max).exp();
                    sum += *o;
                }
                for o in out[r * cols..(r + 1) * cols].iter_mut() {
                    *o /= sum;
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, nodes[self.idx].requires_grad)
        };
        Ok(self.tape.push(value, Op::Softmax(self.idx), rg))
    }

    /// log(softmax(x)) over the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>, TensorError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            if x.rank() == 0 {
                return Err(TensorError::InvalidAxis { axis: 0, rank: 0 });
            }
            let cols = *x.shape().last().unwrap();
            let rows = x.numel() / cols;
            let mut out = vec![0.0; x.numel()];
            for r in 0..rows {
                let xs = &x.data()[r * cols..(r + 1) * cols];
                let max = xs.iter().fold(Real::NEG_INFINITY, |m, &v| m.max(v));
                let lse = xs.iter().map(|&v| (v - max).exp()).sum::<Real>().ln() + max;
                for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(xs) {
                    *o = v - lse;
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, nodes[self.idx].requires_grad)
        };
        Ok(self.tape.push(value, Op::LogSoftmax(self.idx), rg))
    }

    /// Layer normalization over the last axis (no affine part).
    pub fn layer_norm(self, eps: Real) -> Result<Var<'t>, TensorError> {
        let (value, rg, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            if x.rank() == 0 {
                return Err(TensorError::InvalidAxis { axis: 0, rank: 0 });
            }
            let cols = *x.shape().last().unwrap();
            let rows = x.numel() / cols;
            let mut out = vec![0.0; x.numel()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let xs = &x.data()[r * cols..(r + 1) * cols];
                let mean = xs.iter().sum::<Real>() / cols as Real;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<Real>() / cols as Real;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[r] = istd;
                for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(xs) {
                    *o = (v - mean) * istd;
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, nodes[self.idx].requires_grad, inv_std)
        };
        Ok(self.tape.push(value, Op::LayerNorm { x: self.idx, inv_std }, rg))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>, TensorError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.idx].value.reshaped(shape)?, nodes[self.idx].requires_grad)
        };
        Ok(self.tape.push(value, Op::Reshape(self.idx), rg))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>, TensorError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let rank = x.rank();
            let mut seen = vec![false; rank];
            if axes.len() != rank {
                return Err(TensorError::InvalidAxis { axis: axes.len(), rank });
            }
            for &a in axes {
                if a >= rank || seen[a] {
                    return Err(TensorError::InvalidAxis { axis: a, rank });
                }
                seen[a] = true;
            }
            (permute_tensor(x, axes), nodes[self.idx].requires_grad)
        };
        Ok(self.tape.push(value, Op::Permute { x: self.idx, axes: axes.to_vec() }, rg))
    }

    /// 2D transpose.
    pub fn transpose(self) -> Result<Var<'t>, TensorError> {
        self.permute(&[1, 0])
    }

    /// Rectangular sub-block: one (start, end) range per axis.
    pub fn slice(self, ranges: &[(usize, usize)]) -> Result<Var<'t>, TensorError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            if ranges.len() != x.rank() {
                return Err(TensorError::InvalidAxis { axis: ranges.len(), rank: x.rank() });
            }
            for (d, &(lo, hi)) in ranges.iter().enumerate() {
                if lo >= hi || hi > x.shape()[d] {
                    return Err(TensorError::ShapeMismatch {
                        context: "slice range",
                        lhs: x.shape().to_vec(),
                        rhs: vec![lo, hi],
                    });
                }
            }
            let out_shape: Vec<usize> = ranges.iter().map(|(a, b)| b - a).collect();
            let mut out = Tensor::zeros(&out_shape);
            gather_slice(x, &mut out, ranges);
            (out, nodes[self.idx].requires_grad)
        };
        Ok(self.tape.push(value, Op::Slice { x: self.idx, ranges: ranges.to_vec() }, rg))
    }

    pub fn sum(self) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            (Tensor::scalar(nodes[self.idx].value.sum()), nodes[self.idx].requires_grad)
        };
        self.tape.push(value, Op::SumAll(self.idx), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            (Tensor::scalar(x.sum() / x.numel() as Real), nodes[self.idx].requires_grad)
        };
        self.tape.push(value, Op::MeanAll(self.idx), rg)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t>, TensorError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            if axis >= x.rank() {
                return Err(TensorError::InvalidAxis { axis, rank: x.rank() });
            }
            let shape = x.shape();
            let outer: usize = shape[..axis].iter().product();
            let axis_len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for a in 0..axis_len {
                    for i in 0..inner {
                        out[o * inner + i] += x.data()[(o * axis_len + a) * inner + i];
                    }
                }
            }
            if mean {
                let inv = 1.0 / axis_len as Real;
                for v in &mut out {
                    *v *= inv;
                }
            }
            let mut out_shape = shape.to_vec();
            out_shape.remove(axis);
            (Tensor::new(out_shape, out)?, nodes[self.idx].requires_grad)
        };
        let op = if mean {
            Op::MeanAxis { x: self.idx, axis }
        } else {
            Op::SumAxis { x: self.idx, axis }
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Signed scatter into a fresh tensor of shape `out_shape`:
    /// `out[i] = sign * self[j]` where `map[i] = Some((j, sign))`, else 0.
    pub fn gather_signed(
        self,
        out_shape: Vec<usize>,
        map: ScatterMap,
    ) -> Result<Var<'t>, TensorError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let out_numel: usize = out_shape.iter().product();
            if map.len() != out_numel {
                return Err(TensorError::ShapeMismatch {
                    context: "gather_signed map length",
                    lhs: out_shape,
                    rhs: vec![map.len()],
                });
            }
            let mut out = vec![0.0; out_numel];
            for (o, entry) in out.iter_mut().zip(map.iter()) {
                if let Some((j, s)) = entry {
                    if *j >= x.numel() {
                        return Err(TensorError::ShapeMismatch {
                            context: "gather_signed source index",
                            lhs: vec![x.numel()],
                            rhs: vec![*j],
                        });
                    }
                    *o = s * x.data()[*j];
                }
            }
            (Tensor::new(out_shape, out)?, nodes[self.idx].requires_grad)
        };
        Ok(self.tape.push(value, Op::GatherSigned { x: self.idx, map }, rg))
    }

    /// Rearrange a [C,H,W] image into [(H/p)*(W/p), C*p*p] patch rows.
    pub fn patchify(self, patch: usize) -> Result<Var<'t>, TensorError> {
        let (value, rg, meta) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            if x.rank() != 3 || patch == 0 || x.shape()[1] % patch != 0 || x.shape()[2] % patch != 0
            {
                return Err(TensorError::ShapeMismatch {
                    context: "patchify",
                    lhs: x.shape().to_vec(),
                    rhs: vec![patch],
                });
            }
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let tokens = (h / patch) * (w / patch);
            let feat = c * patch * patch;
            let mut out = vec![0.0; tokens * feat];
            patchify_gather(x.data(), &mut out, patch, c, h, w);
            (Tensor::new(vec![tokens, feat], out)?, nodes[self.idx].requires_grad, (c, h, w))
        };
        let (c, h, w) = meta;
        Ok(self.tape.push(value, Op::Patchify { x: self.idx, patch, c, h, w }, rg))
    }
}

/// Concatenate along `axis`. All parts must live on the same tape and agree
/// on every other axis.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, TensorError> {
    assert!(!parts.is_empty(), "concat of zero parts");
    let tape = parts[0].tape;
    let (value, rg) = {
        let nodes = tape.nodes.borrow();
        let first = nodes[parts[0].idx].value.shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidAxis { axis, rank: first.len() });
        }
        let mut total_axis = 0usize;
        for p in parts {
            let s = nodes[p.idx].value.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d])
            {
                return Err(TensorError::ShapeMismatch {
                    context: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; out_shape.iter().product()];
        for o in 0..outer {
            let mut written = 0usize;
            for p in parts {
                let pv = &nodes[p.idx].value;
                let plen = pv.shape()[axis];
                let src = &pv.data()[o * plen * inner..(o + 1) * plen * inner];
                let dst_base = (o * total_axis + written) * inner;
                out[dst_base..dst_base + plen * inner].copy_from_slice(src);
                written += plen;
            }
        }
        (
            Tensor::new(out_shape, out)?,
            parts.iter().any(|p| nodes[p.idx].requires_grad),
        )
    };
    Ok(tape.push(
        value,
        Op::Concat { parts: parts.iter().map(|p| p.idx).collect(), axis },
        rg,
    ))
}

fn gather_slice(src: &Tensor, dst: &mut Tensor, ranges: &[(usize, usize)]) {
    let rank = ranges.len();
    let src_shape = src.shape();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    }
    let out_shape: Vec<usize> = ranges.iter().map(|(a, b)| b - a).collect();
    let numel: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut off: usize = ranges.iter().zip(&src_strides).map(|((a, _), s)| a * s).sum();
    for i in 0..numel {
        dst.data_mut()[i] = src.data()[off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Real, b: Real) -> bool {
        (a - b).abs() < 1e-10
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = x.softmax().unwrap().value();
        for &v in y.data() {
            assert!(close(v, 1.0 / 3.0));
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = x.mul(x).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_clip_subgradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap());
        let loss = x.clip(0.0, 1.0).sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = x.mul_scalar(2.0);
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { numel: 2 }));
    }

    #[test]
    fn gradient_scales_linearly_with_root() {
        // Linearity of backward for add/matmul chains.
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap());
        let base = a.matmul(b).unwrap().sum();
        let scaled = a.matmul(b).unwrap().sum().mul_scalar(3.0);
        let g1 = tape.backward(base).unwrap();
        let g3 = tape.backward(scaled).unwrap();
        for (x, y) in g1.get(a).unwrap().data().iter().zip(g3.get(a).unwrap().data()) {
            assert!(close(*y, 3.0 * x));
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(a.matmul(b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn invalid_axis_reported() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.sum_axis(2), Err(TensorError::InvalidAxis { axis: 2, rank: 2 })));
    }

    #[test]
    fn broadcast_add_bias() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
        let b = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = x.add(b).unwrap();
        assert_eq!(y.value().data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        let loss = y.sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn concat_and_slice_roundtrip_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1, 2], vec![5.0, 6.0]).unwrap());
        let c = concat(&[a, b], 0).unwrap();
        assert_eq!(c.value().shape(), &[3, 2]);
        let s = c.slice(&[(2, 3), (0, 2)]).unwrap();
        assert_eq!(s.value().data(), &[5.0, 6.0]);
        let grads = tape.backward(s.sum()).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
        assert!(grads.get(a).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn permute_roundtrip() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as Real));
        let y = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn patchify_identity_when_patch_covers_image() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 2], |i| i as Real));
        let p = x.patchify(2).unwrap();
        assert_eq!(p.value().shape(), &[1, 4]);
        assert_eq!(p.value().data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let y = x.max_pool2d(2, 2).unwrap();
        assert_eq!(y.value().data(), &[5.0]);
        let grads = tape.backward(y.sum()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
