use std::cell::{Ref, RefCell};
use std::fmt;

use super::conv::{self, ConvGeom};
use super::{channel_axis, strides, Real, Tensor};
use crate::error::{dim_err, Error, Result};

/// Recorded operation. Parents are tape indices, which always precede the
/// node that refers to them.
enum Op<T> {
    Leaf,
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, k: T },
    ChannelMul { y: usize, a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    MatMul { x: usize, w: usize },
    Conv2d { x: usize, w: usize, bias: Option<usize>, geom: ConvGeom },
    Relu { x: usize },
    Sigmoid { x: usize },
    Mean { x: usize, axes: Vec<usize> },
    Sum { x: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: usize, gamma: usize, beta: usize, mean: Vec<T>, inv_std: Vec<T> },
    LogSoftmax { x: usize },
    Nll { logp: usize, targets: Vec<usize> },
    Reshape { x: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only record of a forward computation. Confined to one thread;
/// dropping it frees every intermediate.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.get(v).map(|g| Tensor::new(&v.shape(), g.to_vec()).expect("gradient shape"))
    }

    /// Adds the gradient of `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var<'_, T>, t: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => dim_err("variable has no gradient (not a leaf requiring grad)"),
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        let mut t = t;
        t.zero_grad();
        self.push(t, Op::Leaf)
    }

    /// Records a trainable leaf (copied from `t`).
    pub fn param(&self, t: &Tensor<T>) -> Var<'_, T> {
        let mut v = t.clone();
        v.zero_grad();
        v.set_requires_grad(true);
        self.push(v, Op::Leaf)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.leaf(t.with_requires_grad(false))
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn node_value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].value.requires_grad())
    }

    fn output(&self, shape: &[usize], data: Vec<T>, parents: &[usize], op: Op<T>) -> Var<'_, T> {
        let rg = self.needs_grad(parents);
        let value = Tensor::new(shape, data).expect("op produced consistent shape").with_requires_grad(rg);
        self.push(value, op)
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited once, in
    /// reverse recording order; only leaf gradients are retained.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return dim_err(format!("backward needs a scalar loss, got shape {:?}", nodes[loss.id].value.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.value.requires_grad() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }
        for (id, node) in nodes.iter().enumerate() {
            let leaf = matches!(node.op, Op::Leaf) && node.value.requires_grad();
            if !leaf {
                grads[id] = None;
            } else if grads[id].is_none() {
                grads[id] = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, contribution: Vec<T>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &c)| *a = *a + c),
        slot @ None => *slot = Some(contribution),
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |i: usize| &nodes[i].value;
    let rg = |i: usize| nodes[i].value.requires_grad();
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            if rg(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if rg(*b) {
                let nb = val(*b).numel();
                let mut gb = vec![T::zero(); nb];
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % nb] = gb[i % nb] + gi;
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Mul { a, b } => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if rg(*a) {
                accumulate(grads, *a, g.iter().zip(vb).map(|(&g, &b)| g * b).collect());
            }
            if rg(*b) {
                accumulate(grads, *b, g.iter().zip(va).map(|(&g, &a)| g * a).collect());
            }
        }
        Op::Scale { x, k } => {
            accumulate(grads, *x, g.iter().map(|&g| g * *k).collect());
        }
        Op::ChannelMul { y, a } => {
            let (vy, va) = (val(*y).data(), val(*a).data());
            let inner = vy.len() / va.len();
            if rg(*y) {
                let gy = g.iter().enumerate().map(|(i, &g)| g * va[i / inner]).collect();
                accumulate(grads, *y, gy);
            }
            if rg(*a) {
                let ga = g
                    .chunks(inner)
                    .zip(vy.chunks(inner))
                    .map(|(gc, yc)| gc.iter().zip(yc).map(|(&g, &y)| g * y).sum())
                    .collect();
                accumulate(grads, *a, ga);
            }
        }
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis] * inner;
                if rg(p) {
                    let mut gp = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        gp.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                    }
                    accumulate(grads, p, gp);
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let xs = val(*x).shape();
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[*axis + 1..].iter().product();
            let total = xs[*axis] * inner;
            let len = node.value.shape()[*axis] * inner;
            let mut gx = vec![T::zero(); val(*x).numel()];
            for o in 0..outer {
                let dst = o * total + start * inner;
                gx[dst..dst + len].copy_from_slice(&g[o * len..(o + 1) * len]);
            }
            accumulate(grads, *x, gx);
        }
        Op::MatMul { x, w } => {
            let (vx, vw) = (val(*x), val(*w));
            let (k, n) = (vw.shape()[0], vw.shape()[1]);
            let m = vx.numel() / k;
            if rg(*x) {
                // dX = dY * W^T
                let mut gx = vec![T::zero(); m * k];
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g,
                    (n as isize, 1),
                    vw.data(),
                    (1, n as isize),
                    T::zero(),
                    &mut gx,
                    (k as isize, 1),
                );
                accumulate(grads, *x, gx);
            }
            if rg(*w) {
                // dW = X^T * dY
                let mut gw = vec![T::zero(); k * n];
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    vx.data(),
                    (1, k as isize),
                    g,
                    (n as isize, 1),
                    T::zero(),
                    &mut gw,
                    (n as isize, 1),
                );
                accumulate(grads, *w, gw);
            }
        }
        Op::Conv2d { x, w, bias, geom } => {
            let need = (rg(*x), rg(*w), bias.is_some_and(rg));
            let cg = conv::backward(val(*x).data(), val(*w).data(), g, geom, need);
            if let Some(gx) = cg.x {
                accumulate(grads, *x, gx);
            }
            if let Some(gw) = cg.w {
                accumulate(grads, *w, gw);
            }
            if let (Some(b), Some(gb)) = (bias, cg.bias) {
                accumulate(grads, *b, gb);
            }
        }
        Op::Relu { x } => {
            let gx = g.iter().zip(val(*x).data()).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
            accumulate(grads, *x, gx);
        }
        Op::Sigmoid { x } => {
            // s * sigmoid(-x) rather than s * (1 - s), which cancels as s -> 1
            let gx = g
                .iter()
                .zip(node.value.data())
                .zip(val(*x).data())
                .map(|((&g, &s), &v)| g * s * stable_sigmoid(-v))
                .collect();
            accumulate(grads, *x, gx);
        }
        Op::Mean { x, axes } => {
            let xs = val(*x).shape();
            let count: usize = axes.iter().map(|&a| xs[a]).product();
            let scale = T::one() / T::from_usize(count).unwrap();
            let map = reduction_map(xs, axes);
            let gx = map.iter().map(|&o| g[o] * scale).collect();
            accumulate(grads, *x, gx);
        }
        Op::Sum { x } => {
            accumulate(grads, *x, vec![g[0]; val(*x).numel()]);
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
            let shape = val(*x).shape();
            let (outer, c, inner) = channel_split(shape);
            let m = T::from_usize(outer * inner).unwrap();
            let gm = val(*gamma).data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for i in base..base + inner {
                        dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                        dbeta[ch] = dbeta[ch] + g[i];
                    }
                }
            }
            if rg(*x) {
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for ch in 0..c {
                        let k = gm[ch] * inv_std[ch] / m;
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            gx[i] = k * (m * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            if rg(*gamma) {
                accumulate(grads, *gamma, dgamma);
            }
            if rg(*beta) {
                accumulate(grads, *beta, dbeta);
            }
        }
        Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
            let vx = val(*x);
            let (outer, c, inner) = channel_split(vx.shape());
            let gm = val(*gamma).data();
            let mut gx = vec![T::zero(); g.len()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for i in base..base + inner {
                        let xhat = (vx.data()[i] - mean[ch]) * inv_std[ch];
                        gx[i] = g[i] * gm[ch] * inv_std[ch];
                        dgamma[ch] = dgamma[ch] + g[i] * xhat;
                        dbeta[ch] = dbeta[ch] + g[i];
                    }
                }
            }
            if rg(*x) {
                accumulate(grads, *x, gx);
            }
            if rg(*gamma) {
                accumulate(grads, *gamma, dgamma);
            }
            if rg(*beta) {
                accumulate(grads, *beta, dbeta);
            }
        }
        Op::LogSoftmax { x } => {
            let k = *node.value.shape().last().unwrap();
            let mut gx = Vec::with_capacity(g.len());
            for (gr, lr) in g.chunks(k).zip(node.value.data().chunks(k)) {
                let total: T = gr.iter().copied().sum();
                gx.extend(gr.iter().zip(lr).map(|(&g, &l)| g - l.exp() * total));
            }
            accumulate(grads, *x, gx);
        }
        Op::Nll { logp, targets } => {
            let k = *val(*logp).shape().last().unwrap();
            let scale = -g[0] / T::from_usize(targets.len()).unwrap();
            let mut gl = vec![T::zero(); val(*logp).numel()];
            for (r, &t) in targets.iter().enumerate() {
                gl[r * k + t] = scale;
            }
            accumulate(grads, *logp, gl);
        }
        Op::Reshape { x } => accumulate(grads, *x, g.to_vec()),
    }
}

/// `(outer, C, inner)` around the channel axis (`rank - 3`, or the last axis
/// of a rank-2 `[N, C]` batch).
fn channel_split(shape: &[usize]) -> (usize, usize, usize) {
    let ca = if shape.len() >= 3 { shape.len() - 3 } else { shape.len() - 1 };
    (shape[..ca].iter().product(), shape[ca], shape[ca + 1..].iter().product())
}

/// For each input element, the flat index of the output it reduces into.
fn reduction_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let kept_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
    let kept_strides = strides(&kept_shape);
    let mut out_stride = vec![0; shape.len()];
    for (k, &a) in kept.iter().enumerate() {
        out_stride[a] = kept_strides[k];
    }
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    let mut o = 0usize;
    for _ in 0..numel {
        map.push(o);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            o += out_stride[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            o -= out_stride[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn stable_sigmoid<T: Real>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    // keep the open interval (0, 1) where the exact value would round to an endpoint
    let hi = T::one() - T::epsilon() / T::of(2.0);
    s.max(T::min_positive_value()).min(hi)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node_value(self.id).shape().to_vec()
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.node_value(self.id).clone()
    }

    pub fn data(&self) -> Ref<'t, [T]> {
        Ref::map(self.tape.node_value(self.id), |t| t.data())
    }

    pub fn scalar(&self) -> T {
        self.data()[0]
    }

    fn same_tape(&self, other: &Var<'_, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables recorded on different tapes");
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `self`
    /// when its shape is a suffix of `self`'s shape (or it holds one value).
    pub fn add(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&b);
        let (va, vb) = (self.tape.node_value(self.id), self.tape.node_value(b.id));
        let (sa, sb) = (va.shape(), vb.shape());
        let suffix = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if !suffix && vb.numel() != 1 {
            return dim_err(format!("cannot broadcast {sb:?} onto {sa:?}"));
        }
        let nb = vb.numel();
        let data = va.data().iter().enumerate().map(|(i, &x)| x + vb.data()[i % nb]).collect();
        let shape = sa.to_vec();
        drop((va, vb));
        Ok(self.tape.output(&shape, data, &[self.id, b.id], Op::Add { a: self.id, b: b.id }))
    }

    pub fn mul(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&b);
        let (va, vb) = (self.tape.node_value(self.id), self.tape.node_value(b.id));
        if va.shape() != vb.shape() {
            return dim_err(format!("mul: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let shape = va.shape().to_vec();
        drop((va, vb));
        Ok(self.tape.output(&shape, data, &[self.id, b.id], Op::Mul { a: self.id, b: b.id }))
    }

    pub fn scale(self, k: T) -> Var<'t, T> {
        let v = self.tape.node_value(self.id);
        let data = v.data().iter().map(|&x| x * k).collect();
        let shape = v.shape().to_vec();
        drop(v);
        self.tape.output(&shape, data, &[self.id], Op::Scale { x: self.id, k })
    }

    /// `out[.., c, d, t] = y[.., c, d, t] * a[.., c]`: per-channel scaling of a
    /// feature map by a gate whose shape is the map's shape minus `D x T`.
    pub fn channel_mul(self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&a);
        let (vy, va) = (self.tape.node_value(self.id), self.tape.node_value(a.id));
        let ys = vy.shape();
        channel_axis(ys)?;
        if va.shape() != &ys[..ys.len() - 2] {
            return dim_err(format!("gate of shape {:?} does not match channels of map {ys:?}", va.shape()));
        }
        let inner = ys[ys.len() - 2] * ys[ys.len() - 1];
        let data = vy.data().iter().enumerate().map(|(i, &y)| y * va.data()[i / inner]).collect();
        let shape = ys.to_vec();
        drop((vy, va));
        Ok(self.tape.output(&shape, data, &[self.id, a.id], Op::ChannelMul { y: self.id, a: a.id }))
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let Some(first) = parts.first() else {
            return dim_err("concat of zero tensors");
        };
        let tape = first.tape;
        let values: Vec<_> = parts
            .iter()
            .map(|p| {
                first.same_tape(p);
                tape.node_value(p.id)
            })
            .collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        for v in &values {
            let s = v.shape();
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return dim_err(format!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        drop(values);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.output(&shape, data, &ids, Op::Concat { parts: ids.clone(), axis }))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.tape.node_value(self.id);
        let xs = v.shape();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return dim_err(format!("slice [{start}, {start}+{len}) on axis {axis} of {xs:?}"));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let total = xs[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = o * total + start * inner;
            data.extend_from_slice(&v.data()[from..from + len * inner]);
        }
        let mut shape = xs.to_vec();
        shape[axis] = len;
        drop(v);
        Ok(self.tape.output(&shape, data, &[self.id], Op::Slice { x: self.id, axis, start }))
    }

    /// Splits along `axis` into `s` equal parts.
    pub fn split(self, axis: usize, s: usize) -> Result<Vec<Var<'t, T>>> {
        let shape = self.shape();
        if axis >= shape.len() || s == 0 || !shape[axis].is_multiple_of(s) {
            return dim_err(format!("cannot split axis {axis} of {shape:?} into {s} parts"));
        }
        let len = shape[axis] / s;
        (0..s).map(|i| self.slice(axis, i * len, len)).collect()
    }

    pub fn split_channels(self, s: usize) -> Result<Vec<Var<'t, T>>> {
        let axis = channel_axis(&self.shape())?;
        self.split(axis, s)
    }

    pub fn concat_channels(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let Some(first) = parts.first() else {
            return dim_err("concat of zero tensors");
        };
        let axis = channel_axis(&first.shape())?;
        Self::concat(parts, axis)
    }

    /// `x W` for `x` of shape `[in]` or `[rows, in]` and `W` of shape
    /// `[in, out]`; per row this is `W^T x`.
    pub fn matmul(self, w: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&w);
        let (vx, vw) = (self.tape.node_value(self.id), self.tape.node_value(w.id));
        let (xs, ws) = (vx.shape(), vw.shape());
        if ws.len() != 2 || xs.is_empty() || xs.len() > 2 || xs[xs.len() - 1] != ws[0] {
            return dim_err(format!("matmul: x {xs:?} with W {ws:?}"));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = vx.numel() / k;
        let mut data = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            vx.data(),
            (k as isize, 1),
            vw.data(),
            (n as isize, 1),
            T::zero(),
            &mut data,
            (n as isize, 1),
        );
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = n;
        drop((vx, vw));
        Ok(self.tape.output(&shape, data, &[self.id, w.id], Op::MatMul { x: self.id, w: w.id }))
    }

    /// Cross-correlation of `[N, Cin, H, W]` with kernels `[Cout, Cin, kh, kw]`.
    pub fn conv2d(self, w: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        self.same_tape(&w);
        let (vx, vw) = (self.tape.node_value(self.id), self.tape.node_value(w.id));
        let Some(geom) = ConvGeom::new(vx.shape(), vw.shape(), stride, padding) else {
            return dim_err(format!(
                "conv2d: input {:?}, kernels {:?}, stride {stride}, padding {padding}",
                vx.shape(),
                vw.shape()
            ));
        };
        let vb = match bias {
            Some(b) => {
                self.same_tape(&b);
                let vb = self.tape.node_value(b.id);
                if vb.shape() != [geom.cout] {
                    return dim_err(format!("conv2d bias {:?} for {} kernels", vb.shape(), geom.cout));
                }
                Some(vb)
            }
            None => None,
        };
        let data = conv::forward(vx.data(), vw.data(), vb.as_ref().map(|b| b.data()), &geom);
        drop((vx, vw, vb));
        let mut parents = vec![self.id, w.id];
        parents.extend(bias.map(|b| b.id));
        Ok(self.tape.output(
            &geom.out_shape(),
            data,
            &parents,
            Op::Conv2d { x: self.id, w: w.id, bias: bias.map(|b| b.id), geom },
        ))
    }

    fn unary(self, f: impl Fn(T) -> T, op: Op<T>) -> Var<'t, T> {
        let v = self.tape.node_value(self.id);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        drop(v);
        self.tape.output(&shape, data, &[self.id], op)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(|x| if x.is_nan() || x > T::zero() { x } else { T::zero() }, Op::Relu { x: self.id })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(stable_sigmoid, Op::Sigmoid { x: self.id })
    }

    /// Arithmetic mean over `axes`, which are removed from the shape. Reducing
    /// every axis yields shape `[1]`; an empty axis list is the identity.
    pub fn mean_over(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let v = self.tape.node_value(self.id);
        let xs = v.shape();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= xs.len()) {
            return dim_err(format!("mean axes {axes:?} out of range for {xs:?}"));
        }
        let count: usize = axes.iter().map(|&a| xs[a]).product();
        let mut shape: Vec<usize> = (0..xs.len()).filter(|a| !axes.contains(a)).map(|a| xs[a]).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let out_len: usize = shape.iter().product();
        let scale = T::one() / T::from_usize(count).unwrap();
        let trailing = axes.iter().enumerate().all(|(i, &a)| a == xs.len() - axes.len() + i);
        let data = if trailing {
            v.data().chunks(count).map(|c| c.iter().copied().sum::<T>() * scale).collect()
        } else {
            let mut acc = vec![T::zero(); out_len];
            for (&o, &x) in reduction_map(xs, &axes).iter().zip(v.data()) {
                acc[o] = acc[o] + x;
            }
            acc.into_iter().map(|s| s * scale).collect()
        };
        drop(v);
        Ok(self.tape.output(&shape, data, &[self.id], Op::Mean { x: self.id, axes }))
    }

    pub fn sum(self) -> Var<'t, T> {
        let total: T = self.data().iter().copied().sum();
        self.tape.output(&[1], vec![total], &[self.id], Op::Sum { x: self.id })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().reshape(shape)?;
        let shape = v.shape().to_vec();
        Ok(self.tape.output(&shape, v.into_data(), &[self.id], Op::Reshape { x: self.id }))
    }

    /// Batch normalization with batch statistics over every axis except the
    /// channel axis. Returns the output with the batch mean and biased
    /// variance per channel.
    pub fn batch_norm_train(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<(Var<'t, T>, Vec<T>, Vec<T>)> {
        let v = self.tape.node_value(self.id);
        let (outer, c, inner) = bn_dims(v.shape(), &self.tape.node_value(gamma.id), &self.tape.node_value(beta.id))?;
        let m = T::from_usize(outer * inner).unwrap();
        let x = v.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                mean[ch] = mean[ch] + x[base..base + inner].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|s| *s = *s / m);
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                var[ch] = var[ch] + x[base..base + inner].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|s| *s = *s / m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gm, bt) = (self.tape.node_value(gamma.id), self.tape.node_value(beta.id));
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = xhat[i] * gm.data()[ch] + bt.data()[ch];
                }
            }
        }
        let shape = v.shape().to_vec();
        drop((v, gm, bt));
        let out = self.tape.output(
            &shape,
            out,
            &[self.id, gamma.id, beta.id],
            Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std },
        );
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed statistics: `(x - mean) / sqrt(var + eps) * gamma + beta`.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var<'t, T>> {
        let v = self.tape.node_value(self.id);
        let (outer, c, inner) = bn_dims(v.shape(), &self.tape.node_value(gamma.id), &self.tape.node_value(beta.id))?;
        if mean.len() != c || var.len() != c {
            return dim_err(format!("batch-norm statistics for {} channels, map has {c}", mean.len()));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gm, bt) = (self.tape.node_value(gamma.id), self.tape.node_value(beta.id));
        let x = v.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    out[i] = (x[i] - mean[ch]) * inv_std[ch] * gm.data()[ch] + bt.data()[ch];
                }
            }
        }
        let shape = v.shape().to_vec();
        drop((v, gm, bt));
        Ok(self.tape.output(
            &shape,
            out,
            &[self.id, gamma.id, beta.id],
            Op::BatchNormEval { x: self.id, gamma: gamma.id, beta: beta.id, mean: mean.to_vec(), inv_std },
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t, T> {
        let v = self.tape.node_value(self.id);
        let k = *v.shape().last().unwrap();
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        let shape = v.shape().to_vec();
        drop(v);
        self.tape.output(&shape, data, &[self.id], Op::LogSoftmax { x: self.id })
    }

    /// Mean negative log-likelihood of `targets` under row-wise log-probabilities.
    pub fn nll(self, targets: &[usize]) -> Result<Var<'t, T>> {
        let v = self.tape.node_value(self.id);
        let k = *v.shape().last().unwrap();
        let rows = v.numel() / k;
        if rows != targets.len() || targets.iter().any(|&t| t >= k) {
            return dim_err(format!("nll: {} targets for {rows} rows of {k} classes", targets.len()));
        }
        let total: T = targets.iter().enumerate().map(|(r, &t)| v.data()[r * k + t]).sum();
        let loss = -total / T::from_usize(rows).unwrap();
        drop(v);
        Ok(self.tape.output(&[1], vec![loss], &[self.id], Op::Nll { logp: self.id, targets: targets.to_vec() }))
    }
}

fn bn_dims<T: Real>(shape: &[usize], gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return dim_err(format!("batch norm needs rank >= 2, got {shape:?}"));
    }
    let dims = channel_split(shape);
    if gamma.shape() != [dims.1] || beta.shape() != [dims.1] {
        return Err(Error::Dimension(format!(
            "batch-norm affine of shape {:?}/{:?} for {} channels",
            gamma.shape(),
            beta.shape(),
            dims.1
        )));
    }
    Ok(dims)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn add_and_identity() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(&*a.add(b).unwrap().data(), &[4.0, 6.0]);
        let z = tape.constant(Tensor::zeros(&[2]));
        assert_eq!(&*a.add(z).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn add_rejects_non_suffix_broadcast() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[2]));
        assert!(matches!(a.add(b), Err(Error::Dimension(_))));
    }

    #[test]
    fn broadcast_add_conserves_gradient_mass() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(&[3, 2]).with_requires_grad(true));
        let b = tape.leaf(t(&[2], &[0.5, -1.0]).with_requires_grad(true));
        let w = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let loss = a.add(b).unwrap().mul(w).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(b).unwrap(), &[9.0, 12.0]);
        assert_eq!(g.get(a).unwrap(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn channel_mul_identity_and_zero() {
        let tape = Tape::new();
        let y = tape.constant(Tensor::<f64>::from_fn(&[2, 2, 2], |i| i as f64 - 3.5));
        let ones = tape.constant(Tensor::ones(&[2]));
        let zeros = tape.constant(Tensor::zeros(&[2]));
        assert_eq!(&*y.channel_mul(ones).unwrap().data(), &*y.data());
        assert!(y.channel_mul(zeros).unwrap().data().iter().all(|&v| v == 0.0));
        let wrong = tape.constant(Tensor::ones(&[3]));
        assert!(y.channel_mul(wrong).is_err());
    }

    #[test]
    fn split_then_concat_channels() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_fn(&[8, 1, 1], |i| (i + 1) as f64));
        let parts = x.split_channels(4).unwrap();
        let got: Vec<Vec<f64>> = parts.iter().map(|p| p.data().to_vec()).collect();
        assert_eq!(got, vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]);
        assert_eq!(parts[0].shape(), vec![2, 1, 1]);
        let back = Var::concat_channels(&parts).unwrap();
        assert_eq!(back.value(), x.value());
        assert!(x.split_channels(3).is_err());
    }

    #[test]
    fn matmul_identity_and_zero() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, -2.0, 3.0]));
        let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        assert_eq!(&*x.matmul(eye).unwrap().data(), &[1.0, -2.0, 3.0]);
        let zero = tape.constant(Tensor::zeros(&[3, 2]));
        assert_eq!(&*x.matmul(zero).unwrap().data(), &[0.0, 0.0]);
        let bad = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(x.matmul(bad).is_err());
    }

    #[test]
    fn conv_identity_and_pointwise_kernels() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_fn(&[1, 1, 4, 5], |i| (i as f64).sin()));
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let k = tape.constant(k);
        assert_eq!(x.conv2d(k, None, 1, 1).unwrap().value(), x.value());
        let k1 = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.5));
        let y = x.conv2d(k1, None, 1, 0).unwrap();
        for (a, b) in y.data().iter().zip(x.data().iter()) {
            assert_eq!(*a, 2.5 * b);
        }
        let wrong = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(x.conv2d(wrong, None, 1, 1).is_err());
    }

    #[test]
    fn activations() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(&*x.relu().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(x.sigmoid().data()[1], 0.5);
        let big = tape.constant(t(&[2], &[-1e4, 1e4]));
        let s = big.sigmoid();
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn mean_cases() {
        let tape = Tape::new();
        let x = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.mean_over(&[0]).unwrap().scalar(), 2.5);
        let y = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(y.mean_over(&[]).unwrap().value(), y.value());
        assert_eq!(&*y.mean_over(&[0]).unwrap().data(), &[2.0, 3.0]);
        assert!(y.mean_over(&[2]).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::from_fn(&[2, 2], |i| i as f64).with_requires_grad(true));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones(&[2, 2]).with_requires_grad(true));
        let y = tape.leaf(Tensor::<f64>::ones(&[3]).with_requires_grad(true));
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones(&[2]).with_requires_grad(true));
        assert!(tape.backward(x.relu()).is_err());
    }

    #[test]
    fn repeated_backward_is_deterministic() {
        let tape = Tape::new();
        let mut p = Tensor::<f64>::from_fn(&[3], |i| i as f64 + 0.5).with_requires_grad(true);
        let x = tape.leaf(p.clone());
        let loss = x.mul(x).unwrap().sigmoid().sum();
        tape.backward(loss).unwrap().accumulate_into(x, &mut p).unwrap();
        let first = p.grad().unwrap().to_vec();
        p.zero_grad();
        tape.backward(loss).unwrap().accumulate_into(x, &mut p).unwrap();
        assert_eq!(p.grad().unwrap(), first.as_slice());
    }

    #[test]
    fn log_softmax_uniform() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.3, 0.3]));
        let lp = x.log_softmax();
        assert!((lp.data()[0] + std::f64::consts::LN_2).abs() < 1e-15);
        assert!((lp.nll(&[1]).unwrap().scalar() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn reduction_map_matches_manual() {
        // shape [2,3], reduce axis 0 -> each column
        assert_eq!(reduction_map(&[2, 3], &[0]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(reduction_map(&[2, 3], &[1]), vec![0, 0, 0, 1, 1, 1]);
    }
}
