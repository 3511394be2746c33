//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! Ops are appended in execution order, so the record is already a valid
//! topological order of the data-flow graph; backward walks it once in
//! reverse. Every op output is checked for NaN/Inf before it is recorded.

use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::fault;
use crate::kernels::{self, Conv2dSpec, ConvGeom, Pool2dSpec, PoolMode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Log1p,
    Exp,
    Softplus,
}

impl Unary {
    pub const ALL: [Unary; 6] = [
        Unary::Relu,
        Unary::Sigmoid,
        Unary::Tanh,
        Unary::Log1p,
        Unary::Exp,
        Unary::Softplus,
    ];

    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Unary::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Log1p => x.ln_1p(),
            Unary::Exp => x.exp(),
            Unary::Softplus => softplus(x),
        }
    }

    /// d(apply)/dx given the input and the already-computed output.
    fn derivative<T: Element>(self, x: T, y: T) -> T {
        match self {
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Tanh => T::one() - y * y,
            Unary::Log1p => T::one() / (T::one() + x),
            Unary::Exp => y,
            Unary::Softplus => sigmoid(x),
        }
    }
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Sum,
    Mean,
}

/// Coarse op identity, used by fault injection and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Unary(Unary),
    LogClamped,
    Conv2d,
    Pool2d,
    Upsample2x,
    Affine,
    Softmax,
    ChannelMax,
    Reduce,
    Narrow,
    Pad,
    Concat,
    Reshape,
    Transpose,
}

enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(T),
    Unary(Unary),
    LogClamped(T),
    Conv2d { geom: ConvGeom },
    Pool2d { spec: Pool2dSpec, in_chw: [usize; 3], out_hw: [usize; 2], argmax: Vec<usize> },
    Upsample2x { chw: [usize; 3] },
    Affine,
    Softmax { outer: usize, n: usize, inner: usize },
    ChannelMax { argmax: Vec<usize> },
    Reduce { mode: ReduceMode, axes: Vec<usize>, count: usize },
    Narrow { outer: usize, inner: usize, full: usize, start: usize, len: usize },
    Pad { outer: usize, inner: usize, before: usize, len: usize, padded: usize },
    Concat { outer: usize, inner: usize, lens: Vec<usize> },
    Reshape,
    Transpose { rows: usize, cols: usize },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::Unary(u) => OpKind::Unary(*u),
            Op::LogClamped(_) => OpKind::LogClamped,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Pool2d { .. } => OpKind::Pool2d,
            Op::Upsample2x { .. } => OpKind::Upsample2x,
            Op::Affine => OpKind::Affine,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::ChannelMax { .. } => OpKind::ChannelMax,
            Op::Reduce { .. } => OpKind::Reduce,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Pad { .. } => OpKind::Pad,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape => OpKind::Reshape,
            Op::Transpose { .. } => OpKind::Transpose,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, keyed by leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(u64, ParamId, usize)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to a leaf created by
    /// [`Tape::variable`] or [`Tape::param`].
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    /// Gradients of parameters belonging to the store with `key`, one entry
    /// per use of the parameter on the tape.
    pub(crate) fn for_store(&self, key: u64) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter(move |(k, _, _)| *k == key)
            .filter_map(|(_, id, node)| self.leaves.get(node).map(|g| (*id, g)))
    }
}

/// Record of one forward pass. Belongs to a single training step; not
/// shareable across threads while recording.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(u64, ParamId, usize)>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Calls `f(input_index, output_index)` for every element of `shape`, where
/// the output index drops `axes`.
fn for_each_reduced(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let mut out_stride = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        if !axes.contains(&d) {
            out_stride[d] = acc;
            acc *= shape[d];
        }
    }
    let mut idx = vec![0usize; rank];
    let total: usize = shape.iter().product();
    let mut out = 0usize;
    for i in 0..total {
        f(i, out);
        for d in (0..rank).rev() {
            idx[d] += 1;
            out += out_stride[d];
            if idx[d] < shape[d] {
                break;
            }
            out -= out_stride[d] * shape[d];
            idx[d] = 0;
        }
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is reported by backward.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Records a parameter from `store`. Frozen stores yield constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        let v = self.leaf(store.value(id).clone(), trainable);
        if trainable {
            self.params.push((store.key(), id, v.0));
        }
        v
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, parents: Vec<usize>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |p, q| p + q);
        self.push("add", out, vec![a.0, b.0], Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |p, q| p - q);
        self.push("sub", out, vec![a.0, b.0], Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |p, q| p * q);
        self.push("mul", out, vec![a.0, b.0], Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let out = self.value(a).map(|v| v * c);
        self.push("scale", out, vec![a.0], Op::Scale(c))
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| kind.apply(v));
        self.push("pointwise", out, vec![a.0], Op::Unary(kind))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        let fl = T::of(floor);
        let out = self.value(a).map(|v| v.max(fl).ln());
        self.push("log_clamped", out, vec![a.0], Op::LogClamped(fl))
    }

    /// 2-D convolution of `x: [C_in,H,W]` with `k: [C_out,C_in,kh,kw]` and
    /// optional `bias: [C_out]`.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(k));
        if xs.len() != 3 || ks.len() != 4 {
            return Err(TensorError::shape("conv2d", format!("input {xs:?}, kernel {ks:?}")));
        }
        if xs[0] != ks[1] {
            return Err(TensorError::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", xs[0], ks[1]),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(TensorError::shape("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let (ho, wo) = spec.output_hw(xs[1], xs[2], ks[2], ks[3]).ok_or_else(|| {
            TensorError::shape(
                "conv2d",
                format!("dilated kernel {ks:?} with {spec:?} exceeds padded input {xs:?}"),
            )
        })?;
        let geom = ConvGeom {
            c: xs[0],
            h: xs[1],
            w: xs[2],
            o: ks[0],
            kh: ks[2],
            kw: ks[3],
            ho,
            wo,
            spec,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(k).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::new(vec![geom.o, ho, wo], out)?;
        let mut parents = vec![x.0, k.0];
        parents.extend(bias.map(|b| b.0));
        self.push("conv2d", out, parents, Op::Conv2d { geom })
    }

    /// Pooling over the two trailing axes of `x: [C,H,W]`.
    pub fn pool2d(&mut self, x: Var, spec: Pool2dSpec) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(TensorError::shape("pool2d", format!("expected [C,H,W], got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (ho, wo) = spec.output_hw(h, w).ok_or_else(|| {
            TensorError::shape("pool2d", format!("window {:?} larger than input {xs:?}", spec.window))
        })?;
        let (out, argmax) = kernels::pool2d_forward(self.value(x).data(), c, h, w, &spec, ho, wo);
        let out = Tensor::new(vec![c, ho, wo], out)?;
        self.push(
            "pool2d",
            out,
            vec![x.0],
            Op::Pool2d {
                spec,
                in_chw: [c, h, w],
                out_hw: [ho, wo],
                argmax,
            },
        )
    }

    /// Nearest-neighbour 2× upsampling of `x: [C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(TensorError::shape("upsample2x", format!("expected [C,H,W], got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let out = kernels::upsample2x_forward(self.value(x).data(), c, h, w);
        let out = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        self.push("upsample2x", out, vec![x.0], Op::Upsample2x { chw: [c, h, w] })
    }

    /// `x·w + b` for `x: [N,D_in]`, `w: [D_in,D_out]`, `b: [D_out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(TensorError::shape("affine", format!("{xs:?} x {ws:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(TensorError::shape("affine", format!("bias {:?}", bv.shape())));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            n,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            (din as isize, 1),
            self.value(w).data(),
            (dout as isize, 1),
            beta,
            &mut out,
            (dout as isize, 1),
        );
        let out = Tensor::new(vec![n, dout], out)?;
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|b| b.0));
        self.push("affine", out, parents, Op::Affine)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: xs.len(),
            });
        }
        let (outer, n, inner) = split_axis(&xs, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        let out = Tensor::new(xs, out)?;
        self.push("softmax", out, vec![x.0], Op::Softmax { outer, n, inner })
    }

    /// `out[k] = max_c x[c,k]`; ties go to the lowest channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(TensorError::shape("channel_max", format!("expected [C,K], got {xs:?}")));
        }
        let (c, k) = (xs[0], xs[1]);
        let src = self.value(x).data();
        let mut argmax = vec![0usize; k];
        let mut out = src[..k].to_vec();
        for ch in 1..c {
            for j in 0..k {
                if src[ch * k + j] > out[j] {
                    out[j] = src[ch * k + j];
                    argmax[j] = ch;
                }
            }
        }
        let out = Tensor::new(vec![k], out)?;
        self.push("channel_max", out, vec![x.0], Op::ChannelMax { argmax })
    }

    /// Sum or mean over `axes` (dropped from the output shape). Reducing
    /// every axis yields shape `[1]`.
    pub fn reduce(&mut self, x: Var, mode: ReduceMode, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= xs.len()) {
            return Err(TensorError::InvalidAxis {
                op: "reduce",
                axis: bad,
                rank: xs.len(),
            });
        }
        let mut out_shape: Vec<usize> = (0..xs.len()).filter(|d| !axes.contains(d)).map(|d| xs[d]).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let count: usize = axes.iter().map(|&a| xs[a]).product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for_each_reduced(&xs, &axes, |i, o| out[o] += src[i]);
        if mode == ReduceMode::Mean {
            let inv = T::one() / T::of(count as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let out = Tensor::new(out_shape, out)?;
        self.push("reduce", out, vec![x.0], Op::Reduce { mode, axes, count })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, ReduceMode::Sum, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, ReduceMode::Mean, &axes)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(TensorError::InvalidAxis {
                op: "narrow",
                axis,
                rank: xs.len(),
            });
        }
        if len == 0 || start + len > xs[axis] {
            return Err(TensorError::shape(
                "narrow",
                format!("[{start}, {}) outside axis {axis} of {xs:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&xs, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let out = Tensor::new(shape, out)?;
        self.push(
            "narrow",
            out,
            vec![x.0],
            Op::Narrow {
                outer,
                inner,
                full,
                start,
                len,
            },
        )
    }

    /// Zero padding along `axis`.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(TensorError::InvalidAxis {
                op: "pad",
                axis,
                rank: xs.len(),
            });
        }
        let (outer, len, inner) = split_axis(&xs, axis);
        let padded = before + len + after;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * padded * inner];
        for o in 0..outer {
            out[(o * padded + before) * inner..(o * padded + before + len) * inner]
                .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = xs;
        shape[axis] = padded;
        let out = Tensor::new(shape, out)?;
        self.push(
            "pad",
            out,
            vec![x.0],
            Op::Pad {
                outer,
                inner,
                before,
                len,
                padded,
            },
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &l) in xs.iter().zip(&lens) {
                out.extend_from_slice(&self.value(v).data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        self.push(
            "concat",
            out,
            xs.iter().map(|v| v.0).collect(),
            Op::Concat { outer, inner, lens },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, vec![x.0], Op::Reshape)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(TensorError::shape("transpose", format!("expected rank 2, got {xs:?}")));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let out = transpose_data(self.value(x).data(), rows, cols);
        let out = Tensor::new(vec![cols, rows], out)?;
        self.push("transpose", out, vec![x.0], Op::Transpose { rows, cols })
    }

    /// Backpropagates from a scalar `loss` and frees the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let grads = self.backward_retained(loss)?;
        self.nodes = Vec::new();
        self.consumed = true;
        Ok(grads)
    }

    /// Backpropagates without releasing recorded values, so the tape can be
    /// differentiated again. Meant for gradient-check tooling.
    pub fn backward_retained(&self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();
        let flip = fault::active();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                leaves.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            let mut pg = self.node_backward(node, &g);
            if flip == Some(node.op.kind()) {
                for v in pg.iter_mut().flatten().flat_map(|v| v.iter_mut()) {
                    *v = -*v;
                }
            }
            for (&p, pgrad) in node.parents.iter().zip(pg) {
                let Some(pgrad) = pgrad else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pgrad).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pgrad),
                }
            }
        }
        Ok(Gradients {
            leaves,
            params: self.params.clone(),
        })
    }

    fn node_backward(&self, node: &Node<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let need: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
        let pv = |k: usize| &self.nodes[node.parents[k]].value;
        let y = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![need[0].then(|| g.to_vec()), need[1].then(|| g.to_vec())],
            Op::Sub => vec![
                need[0].then(|| g.to_vec()),
                need[1].then(|| g.iter().map(|&v| -v).collect()),
            ],
            Op::Mul => {
                let (a, b) = (pv(0).data(), pv(1).data());
                vec![
                    need[0].then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
                    need[1].then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
                ]
            }
            Op::Scale(c) => vec![Some(g.iter().map(|&v| v * *c).collect())],
            Op::Unary(kind) => {
                let x = pv(0).data();
                vec![Some(
                    g.iter()
                        .zip(x.iter().zip(y))
                        .map(|(&g, (&x, &y))| g * kind.derivative(x, y))
                        .collect(),
                )]
            }
            Op::LogClamped(floor) => {
                let x = pv(0).data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > *floor { g / x } else { T::zero() })
                        .collect(),
                )]
            }
            Op::Conv2d { geom } => {
                let has_bias = node.parents.len() == 3;
                let (dx, dw, db) = kernels::conv2d_backward(
                    pv(0).data(),
                    pv(1).data(),
                    g,
                    geom,
                    need[0],
                    need[1],
                    has_bias && need[2],
                );
                let mut out = vec![dx, dw];
                if has_bias {
                    out.push(db);
                }
                out
            }
            Op::Pool2d {
                spec,
                in_chw: [c, h, w],
                out_hw: [ho, wo],
                argmax,
            } => {
                let mut dx = vec![T::zero(); c * h * w];
                match spec.mode {
                    PoolMode::Max => {
                        for (&gi, &a) in g.iter().zip(argmax) {
                            dx[a] += gi;
                        }
                    }
                    PoolMode::Avg => {
                        let (wh, ww) = spec.window;
                        let inv = T::one() / T::of((wh * ww) as f64);
                        for ch in 0..*c {
                            for oy in 0..*ho {
                                for ox in 0..*wo {
                                    let gi = g[(ch * ho + oy) * wo + ox] * inv;
                                    let (y0, x0) = (oy * spec.stride.0, ox * spec.stride.1);
                                    for iy in y0..y0 + wh {
                                        let row = (ch * h + iy) * w;
                                        for d in &mut dx[row + x0..row + x0 + ww] {
                                            *d += gi;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Upsample2x { chw: [c, h, w] } => vec![Some(kernels::upsample2x_backward(g, *c, *h, *w))],
            Op::Affine => {
                let (x, w) = (pv(0), pv(1));
                let (n, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                let dx = need[0].then(|| {
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(n, dout, din, T::one(), g, (dout as isize, 1), w.data(), (1, dout as isize), T::zero(), &mut dx, (din as isize, 1));
                    dx
                });
                let dw = need[1].then(|| {
                    let mut dw = vec![T::zero(); din * dout];
                    T::gemm(din, n, dout, T::one(), x.data(), (1, din as isize), g, (dout as isize, 1), T::zero(), &mut dw, (dout as isize, 1));
                    dw
                });
                let mut out = vec![dx, dw];
                if node.parents.len() == 3 {
                    out.push(need[2].then(|| {
                        let mut db = vec![T::zero(); dout];
                        for row in g.chunks(dout) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                        db
                    }));
                }
                out
            }
            Op::Softmax { outer, n, inner } => {
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot = (0..*n).fold(T::zero(), |acc, j| acc + g[at(j)] * y[at(j)]);
                        for j in 0..*n {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::ChannelMax { argmax } => {
                let k = argmax.len();
                let mut dx = vec![T::zero(); pv(0).len()];
                for (j, (&gi, &c)) in g.iter().zip(argmax).enumerate() {
                    dx[c * k + j] += gi;
                }
                vec![Some(dx)]
            }
            Op::Reduce { mode, axes, count } => {
                let xs = pv(0).shape();
                let scale = match mode {
                    ReduceMode::Sum => T::one(),
                    ReduceMode::Mean => T::one() / T::of(*count as f64),
                };
                let mut dx = vec![T::zero(); pv(0).len()];
                for_each_reduced(xs, axes, |i, o| dx[i] = g[o] * scale);
                vec![Some(dx)]
            }
            Op::Narrow {
                outer,
                inner,
                full,
                start,
                len,
            } => {
                let mut dx = vec![T::zero(); outer * full * inner];
                for o in 0..*outer {
                    dx[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(dx)]
            }
            Op::Pad {
                outer,
                inner,
                before,
                len,
                padded,
            } => {
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..*outer {
                    dx.extend_from_slice(&g[(o * padded + before) * inner..(o * padded + before + len) * inner]);
                }
                vec![Some(dx)]
            }
            Op::Concat { outer, inner, lens } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                let mut out = Vec::with_capacity(lens.len());
                for (k, &l) in lens.iter().enumerate() {
                    out.push(need[k].then(|| {
                        let mut d = Vec::with_capacity(outer * l * inner);
                        for o in 0..*outer {
                            d.extend_from_slice(&g[(o * total + offset) * inner..(o * total + offset + l) * inner]);
                        }
                        d
                    }));
                    offset += l;
                }
                out
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Transpose { rows, cols } => vec![Some(transpose_data(g, *cols, *rows))],
        }
    }
}

fn transpose_data<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(src[r * cols + c]);
        }
    }
    out
}
