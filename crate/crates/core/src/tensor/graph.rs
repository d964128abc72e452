use super::conv::{self, ConvGeom};
use super::{strides, Tensor};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Lower clamp applied inside every logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Log(Var),
    Sum { input: Var },
    Mean { input: Var, count: usize },
    SumAll(Var),
    MeanAll(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Upsample { x: Var, factor: usize },
    Softmax(Var),
    SliceChannels { x: Var, channels: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of tensor operations in execution order.
///
/// Nodes are appended as operations execute, so the tape order is a
/// topological order and [`Graph::backward`] walks it in reverse. Gradients
/// are retained for leaves only.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
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

    /// Gradient of the last backward pass, for leaves that require one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── elementwise ────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let src = self.value(a);
        let out = Tensor::from_fn(src.shape(), |i| src.data()[i] * factor);
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let out = Tensor::from_fn(src.shape(), |i| src.data()[i].max(T::zero()));
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Relu(a))
    }

    /// Natural logarithm of `max(x, LOG_CLAMP)`.
    pub fn log(&mut self, a: Var) -> Var {
        let eps = T::of(LOG_CLAMP);
        let src = self.value(a);
        let out = Tensor::from_fn(src.shape(), |i| src.data()[i].max(eps).ln());
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Log(a))
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        let bc = Broadcast::new(ta.shape(), tb.shape())?;
        let mut data = Vec::with_capacity(bc.numel());
        bc.for_each(|_, ia, ib| data.push(f(ta.data()[ia], tb.data()[ib])));
        Tensor::new(bc.out.clone(), data)
    }

    // ── reductions ─────────────────────────────────────────────────────

    /// Sum over `axes`, keeping reduced axes as extent 1.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.reduce(a, axes)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            out,
            rg,
            Op::Sum { input: a },
        ))
    }

    /// Mean over `axes`, keeping reduced axes as extent 1.
    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let mut out = self.reduce(a, axes)?;
        let shape = self.shape(a);
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        let inv = T::one() / T::of(count as f64);
        out.data_mut().iter_mut().for_each(|v| *v *= inv);
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            out,
            rg,
            Op::Mean { input: a, count },
        ))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Op::MeanAll(a))
    }

    fn reduce(&self, a: Var, axes: &[usize]) -> Result<Tensor<T>> {
        let src = self.value(a);
        let shape = src.shape();
        let mut out_shape = shape.to_vec();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(shape_err!("reduction axis {} out of range for {:?}", ax, shape));
            }
            out_shape[ax] = 1;
        }
        let mut out = Tensor::zeros(&out_shape);
        let map = ReduceMap::new(shape, &out_shape);
        let data = out.data_mut();
        map.for_each(|i, o| data[o] += src.data()[i]);
        Ok(out)
    }

    // ── network ops ────────────────────────────────────────────────────

    /// 2-d cross-correlation of `x: [N,Cin,H,W]` with `w: [Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = conv::geometry(self.shape(x), self.shape(w), self.shape(b), stride, pad)?;
        let out = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, rg, Op::Conv2d { x, w, b, geom }))
    }

    /// Nearest-neighbour upsampling of `[N,C,H,W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let src = self.value(x);
        let s = src.shape();
        if s.len() != 4 {
            return Err(shape_err!("upsample expects 4-d input, got {:?}", s));
        }
        if factor == 0 {
            return Err(shape_err!("upsample factor must be positive"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let d = src.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                let row = base + (oy / factor) * w;
                for ox in 0..ow {
                    out.push(d[row + ox / factor]);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::Upsample { x, factor }))
    }

    /// Softmax over axis 1 of a `[N,C,...]` tensor, with max-subtraction.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let s = src.shape();
        if s.len() < 2 {
            return Err(shape_err!("softmax_channels expects rank >= 2, got {:?}", s));
        }
        let (n, c) = (s[0], s[1]);
        let plane: usize = s[2..].iter().product();
        let d = src.data();
        let mut out = vec![T::zero(); d.len()];
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let mut max = T::neg_infinity();
                for k in 0..c {
                    max = max.max(d[base + k * plane + p]);
                }
                let mut total = T::zero();
                for k in 0..c {
                    let e = (d[base + k * plane + p] - max).exp();
                    out[base + k * plane + p] = e;
                    total += e;
                }
                let inv = T::one() / total;
                for k in 0..c {
                    out[base + k * plane + p] *= inv;
                }
            }
        }
        let out = Tensor::new(s.to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::Softmax(x)))
    }

    /// Selects channels (axis 1) of a `[N,C,...]` tensor in the given order.
    pub fn slice_channels(&mut self, x: Var, channels: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let s = src.shape();
        if s.len() < 2 {
            return Err(shape_err!("slice_channels expects rank >= 2, got {:?}", s));
        }
        if channels.is_empty() {
            return Err(shape_err!("slice_channels with no channels"));
        }
        if let Some(&bad) = channels.iter().find(|&&k| k >= s[1]) {
            return Err(shape_err!("channel {} out of range for {:?}", bad, s));
        }
        let (n, c) = (s[0], s[1]);
        let plane: usize = s[2..].iter().product();
        let d = src.data();
        let mut out = Vec::with_capacity(n * channels.len() * plane);
        for b in 0..n {
            for &k in channels {
                let start = (b * c + k) * plane;
                out.extend_from_slice(&d[start..start + plane]);
            }
        }
        let mut shape = s.to_vec();
        shape[1] = channels.len();
        let out = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            out,
            rg,
            Op::SliceChannels {
                x,
                channels: channels.to_vec(),
            },
        ))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse-mode pass from a one-element `loss`, populating leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.grads[idx].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, idx, &grad);
        }
        Ok(())
    }
}

struct Grads<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> Grads<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn buf(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let numel = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]))
    }
}

fn propagate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], idx: usize, g: &[T]) {
    let node = &nodes[idx];
    let out_shape = node.value.shape();
    let val = |v: Var| &nodes[v.0].value;
    let mut acc = Grads { nodes, grads };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            for (v, s) in [(*a, T::one()), (*b, sign)] {
                let in_shape = val(v).shape();
                let Some(buf) = acc.buf(v) else { continue };
                if in_shape == out_shape {
                    buf.iter_mut().zip(g).for_each(|(d, &x)| *d += s * x);
                } else {
                    ReduceMap::new(out_shape, in_shape).for_each(|o, i| buf[i] += s * g[o]);
                }
            }
        }
        Op::Mul(a, b) => {
            for (v, other) in [(*a, *b), (*b, *a)] {
                if !acc.wants(v) {
                    continue;
                }
                let (mine, theirs) = (val(v), val(other));
                let buf = acc.buf(v).expect("wanted");
                if mine.shape() == theirs.shape() {
                    for ((d, &x), &y) in buf.iter_mut().zip(g).zip(theirs.data()) {
                        *d += x * y;
                    }
                } else {
                    let bc = Broadcast::new(mine.shape(), theirs.shape())
                        .expect("shapes validated in forward");
                    bc.for_each(|o, i, j| buf[i] += g[o] * theirs.data()[j]);
                }
            }
        }
        Op::Scale(a, factor) => {
            if let Some(buf) = acc.buf(*a) {
                buf.iter_mut().zip(g).for_each(|(d, &x)| *d += *factor * x);
            }
        }
        Op::Relu(a) => {
            if let Some(buf) = acc.buf(*a) {
                for ((d, &x), &y) in buf.iter_mut().zip(g).zip(node.value.data()) {
                    if y > T::zero() {
                        *d += x;
                    }
                }
            }
        }
        Op::Log(a) => {
            let eps = T::of(LOG_CLAMP);
            let input = val(*a).data();
            if let Some(buf) = acc.buf(*a) {
                for ((d, &x), &v) in buf.iter_mut().zip(g).zip(input) {
                    if v > eps {
                        *d += x / v;
                    }
                }
            }
        }
        Op::Sum { input, .. } | Op::Mean { input, .. } => {
            let scale = match &node.op {
                Op::Mean { count, .. } => T::one() / T::of(*count as f64),
                _ => T::one(),
            };
            let in_shape = val(*input).shape();
            if let Some(buf) = acc.buf(*input) {
                ReduceMap::new(in_shape, out_shape).for_each(|i, o| buf[i] += scale * g[o]);
            }
        }
        Op::SumAll(a) | Op::MeanAll(a) => {
            let n = val(*a).numel();
            let s = if matches!(node.op, Op::MeanAll(_)) {
                g[0] / T::of(n as f64)
            } else {
                g[0]
            };
            if let Some(buf) = acc.buf(*a) {
                buf.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (xv, wv) = (val(*x).data(), val(*w).data());
            // Operand grads live in distinct slots; take them out so all
            // three can be borrowed mutably at once.
            let mut take = |v: Var| -> Option<Vec<T>> {
                acc.buf(v)?;
                acc.grads[v.0].take()
            };
            let mut dx = take(*x);
            let mut dw = take(*w);
            let mut db = take(*b);
            conv::backward(
                geom,
                xv,
                wv,
                g,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                if d.is_some() {
                    acc.grads[v.0] = d;
                }
            }
        }
        Op::Upsample { x, factor } => {
            let f = *factor;
            let s = val(*x).shape();
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            let (oh, ow) = (h * f, w * f);
            if let Some(buf) = acc.buf(*x) {
                for plane in 0..planes {
                    let (ib, ob) = (plane * h * w, plane * oh * ow);
                    for oy in 0..oh {
                        let row = ib + (oy / f) * w;
                        for ox in 0..ow {
                            buf[row + ox / f] += g[ob + oy * ow + ox];
                        }
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let (n, c) = (out_shape[0], out_shape[1]);
            let plane: usize = out_shape[2..].iter().product();
            if let Some(buf) = acc.buf(*x) {
                for b in 0..n {
                    let base = b * c * plane;
                    for p in 0..plane {
                        let mut dot = T::zero();
                        for k in 0..c {
                            let i = base + k * plane + p;
                            dot += g[i] * y[i];
                        }
                        for k in 0..c {
                            let i = base + k * plane + p;
                            buf[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
        }
        Op::SliceChannels { x, channels } => {
            let s = val(*x).shape();
            let (n, c) = (s[0], s[1]);
            let plane: usize = s[2..].iter().product();
            if let Some(buf) = acc.buf(*x) {
                for b in 0..n {
                    for (j, &k) in channels.iter().enumerate() {
                        let src = (b * channels.len() + j) * plane;
                        let dst = (b * c + k) * plane;
                        for p in 0..plane {
                            buf[dst + p] += g[src + p];
                        }
                    }
                }
            }
        }
    }
}

/// Index mapping for same-rank broadcasting over singleton axes.
struct Broadcast {
    out: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(shape_err!("cannot broadcast {:?} with {:?}", a, b));
        }
        let mut out = Vec::with_capacity(a.len());
        for (&x, &y) in a.iter().zip(b) {
            if x != y && x != 1 && y != 1 {
                return Err(shape_err!("cannot broadcast {:?} with {:?}", a, b));
            }
            out.push(x.max(y));
        }
        let zero_singletons = |shape: &[usize]| -> Vec<usize> {
            strides(shape)
                .into_iter()
                .zip(shape.iter().zip(&out))
                .map(|(st, (&d, &o))| if d == 1 && o != 1 { 0 } else { st })
                .collect()
        };
        let sa = zero_singletons(a);
        let sb = zero_singletons(b);
        Ok(Self { out, sa, sb })
    }

    fn numel(&self) -> usize {
        self.out.iter().product()
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out.len();
        let total = self.numel();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..total {
            f(o, ia, ib);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ia += self.sa[d];
                ib += self.sb[d];
                if idx[d] < self.out[d] {
                    break;
                }
                ia -= self.sa[d] * idx[d];
                ib -= self.sb[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

/// Maps every index of a full shape onto the index of a kept-dims reduction.
struct ReduceMap(Broadcast);

impl ReduceMap {
    fn new(full: &[usize], reduced: &[usize]) -> Self {
        Self(Broadcast::new(full, reduced).expect("reduced shape is broadcast-compatible"))
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        self.0.for_each(|_, i, o| f(i, o));
    }
}
