//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in construction
//! order, which is already a topological order. [`Tape::backward`] walks the
//! records once in reverse, visiting only nodes that lie on a path from a
//! gradient-requiring leaf to the root.

use std::cell::RefCell;
use std::sync::Arc;

use rand::Rng;

use crate::broadcast::{broadcast_shape, for_each_offset};
use crate::conv::{self, ConvGeometry};
use crate::error::{shape_err, Result, TensorError};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, T),
    ClampMin(usize, T),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Relu(usize),
    Silu(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Dense {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        /// Geometry of the adjoint correlation (output -> input).
        geom: ConvGeometry,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Sum(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    StraightThrough(usize),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward computation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    stopped: RefCell<Stopped<T>>,
}

/// What `stop_gradient` does with its values besides detaching them.
enum Stopped<T> {
    Pass,
    Record(Vec<Arc<Tensor<T>>>),
    /// Substitute earlier recorded values, in call order.
    Replay(std::vec::IntoIter<Arc<Tensor<T>>>),
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    visits: usize,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to `var`, or zeros when `var` is not
    /// on any path to the root.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }

    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }

    /// Number of nodes the backward pass processed.
    pub fn visits(&self) -> usize {
        self.visits
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            stopped: RefCell::new(Stopped::Pass),
        }
    }

    /// Keeps every value passed through `stop_gradient` from now on.
    pub fn record_stopped(&self) {
        *self.stopped.borrow_mut() = Stopped::Record(Vec::new());
    }

    /// Values kept since `record_stopped`, in call order.
    pub fn stopped_values(&self) -> Vec<Arc<Tensor<T>>> {
        match &*self.stopped.borrow() {
            Stopped::Record(v) => v.clone(),
            _ => Vec::new(),
        }
    }

    /// Makes successive `stop_gradient` calls return `values` instead of
    /// their inputs, so a function can be re-evaluated with stopped
    /// branches held fixed.
    pub fn replay_stopped(&self, values: Vec<Arc<Tensor<T>>>) {
        *self.stopped.borrow_mut() = Stopped::Replay(values.into_iter());
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that gradients flow into.
    pub fn param(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.push_arc(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_arc(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.push_arc(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut visits = 0;
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(Tensor::full(root_value.shape(), T::one()));
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let grad = match &node.op {
                Op::Leaf => continue,
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            visits += 1;
            backward_node(&nodes, id, &grad, &mut grads)?;
        }
        // Leaves on the path count as visited too.
        visits += nodes[..=root.id]
            .iter()
            .zip(&grads)
            .filter(|(n, g)| matches!(n.op, Op::Leaf) && g.is_some())
            .count();
        Ok(Gradients {
            grads,
            shapes,
            visits,
        })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Sums a broadcast gradient back down to `target` shape.
fn reduce_to<T: Real>(g: &[T], out_shape: &[usize], target: &[usize]) -> Tensor<T> {
    if out_shape == target {
        return Tensor::new(target, g.to_vec()).expect("same shape");
    }
    let mut acc = vec![T::zero(); numel(target)];
    for_each_offset(target, out_shape, |i, off| acc[off] = acc[off] + g[i]);
    Tensor::new(target, acc).expect("reduced shape")
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn backward_node<T: Real>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let node = &nodes[id];
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    let req = |i: usize| nodes[i].requires_grad;
    let out = &node.value;
    let unary = |grads: &mut [Option<Tensor<T>>], x: usize, f: &dyn Fn(T, T, T) -> T| {
        if req(x) {
            let xv = val(x);
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(out.data())
                .map(|((&gi, &xi), &yi)| f(gi, xi, yi))
                .collect();
            accumulate(grads, x, Tensor::new(xv.shape(), data).expect("unary grad"));
        }
    };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            if req(*a) {
                accumulate(grads, *a, reduce_to(g.data(), out.shape(), val(*a).shape()));
            }
            if req(*b) {
                let neg: Vec<T> = g.data().iter().map(|&v| sign * v).collect();
                accumulate(grads, *b, reduce_to(&neg, out.shape(), val(*b).shape()));
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let is_div = matches!(node.op, Op::Div(..));
            let (av, bv) = (val(*a), val(*b));
            if req(*a) {
                let mut tmp = vec![T::zero(); g.numel()];
                for_each_offset(bv.shape(), out.shape(), |i, off| {
                    tmp[i] = if is_div {
                        g.data()[i] / bv.data()[off]
                    } else {
                        g.data()[i] * bv.data()[off]
                    };
                });
                accumulate(grads, *a, reduce_to(&tmp, out.shape(), av.shape()));
            }
            if req(*b) {
                let mut tmp = vec![T::zero(); g.numel()];
                if is_div {
                    // d(a/b)/db = -(a/b)/b
                    for_each_offset(bv.shape(), out.shape(), |i, off| {
                        tmp[i] = -g.data()[i] * out.data()[i] / bv.data()[off];
                    });
                } else {
                    for_each_offset(av.shape(), out.shape(), |i, off| {
                        tmp[i] = g.data()[i] * av.data()[off];
                    });
                }
                accumulate(grads, *b, reduce_to(&tmp, out.shape(), bv.shape()));
            }
        }
        Op::Neg(x) => unary(grads, *x, &|g, _, _| -g),
        Op::AddScalar(x) => unary(grads, *x, &|g, _, _| g),
        Op::MulScalar(x, c) => {
            let c = *c;
            unary(grads, *x, &move |g, _, _| g * c)
        }
        Op::ClampMin(x, c) => {
            let c = *c;
            unary(grads, *x, &move |g, x, _| if x > c { g } else { T::zero() })
        }
        Op::Exp(x) => unary(grads, *x, &|g, _, y| g * y),
        Op::Log(x) => unary(grads, *x, &|g, x, _| g / x),
        Op::Sqrt(x) => unary(grads, *x, &|g, _, y| g / (y + y)),
        Op::Tanh(x) => unary(grads, *x, &|g, _, y| g * (T::one() - y * y)),
        Op::Sigmoid(x) => unary(grads, *x, &|g, _, y| g * y * (T::one() - y)),
        Op::Softplus(x) => unary(grads, *x, &|g, x, _| g * sigmoid(x)),
        Op::Relu(x) => unary(grads, *x, &|g, x, _| if x > T::zero() { g } else { T::zero() }),
        Op::Silu(x) => unary(grads, *x, &|g, x, _| {
            let s = sigmoid(x);
            g * (s + x * s * (T::one() - s))
        }),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if req(*a) {
                let mut ga = vec![T::zero(); m * k];
                gemm(MatRef::new(g.data(), m, n), MatRef::new(bv.data(), k, n).t(), &mut ga, false);
                accumulate(grads, *a, Tensor::new(av.shape(), ga)?);
            }
            if req(*b) {
                let mut gb = vec![T::zero(); k * n];
                gemm(MatRef::new(av.data(), m, k).t(), MatRef::new(g.data(), m, n), &mut gb, false);
                accumulate(grads, *b, Tensor::new(bv.shape(), gb)?);
            }
        }
        Op::Transpose(x) => {
            if req(*x) {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                accumulate(grads, *x, transpose2(g.data(), c, r));
            }
        }
        Op::Dense { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (n, i) = (xv.shape()[0], xv.shape()[1]);
            let o = wv.shape()[1];
            if req(*x) {
                let mut gx = vec![T::zero(); n * i];
                gemm(MatRef::new(g.data(), n, o), MatRef::new(wv.data(), i, o).t(), &mut gx, false);
                accumulate(grads, *x, Tensor::new(xv.shape(), gx)?);
            }
            if req(*w) {
                let mut gw = vec![T::zero(); i * o];
                gemm(MatRef::new(xv.data(), n, i).t(), MatRef::new(g.data(), n, o), &mut gw, false);
                accumulate(grads, *w, Tensor::new(wv.shape(), gw)?);
            }
            if let Some(b) = b {
                if req(*b) {
                    let mut gb = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(&[o], gb)?);
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            if req(*x) {
                let gx = conv::conv2d_backward_input(geom, g.data(), val(*w).data());
                accumulate(grads, *x, Tensor::new(val(*x).shape(), gx)?);
            }
            if req(*w) {
                let gw = conv::conv2d_backward_kernel(geom, val(*x).data(), g.data());
                accumulate(grads, *w, Tensor::new(val(*w).shape(), gw)?);
            }
            if let Some(b) = b {
                if req(*b) {
                    let gb = conv::channel_sum(
                        geom.batch,
                        geom.out_channels,
                        geom.out_h() * geom.out_w(),
                        g.data(),
                    );
                    accumulate(grads, *b, Tensor::new(val(*b).shape(), gb)?);
                }
            }
        }
        Op::ConvTranspose2d { x, w, b, geom } => {
            // y = adjoint-correlation(x); dy/dx is the correlation itself.
            if req(*x) {
                let gx = conv::conv2d_forward(geom, g.data(), val(*w).data(), None);
                accumulate(grads, *x, Tensor::new(val(*x).shape(), gx)?);
            }
            if req(*w) {
                let gw = conv::conv2d_backward_kernel(geom, g.data(), val(*x).data());
                accumulate(grads, *w, Tensor::new(val(*w).shape(), gw)?);
            }
            if let Some(b) = b {
                if req(*b) {
                    let gb = conv::channel_sum(
                        geom.batch,
                        geom.in_channels,
                        geom.in_h * geom.in_w,
                        g.data(),
                    );
                    accumulate(grads, *b, Tensor::new(val(*b).shape(), gb)?);
                }
            }
        }
        Op::Softmax { x, axis } => {
            if req(*x) {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g.data()[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = y[idx(j)] * (g.data()[idx(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(out.shape(), gx)?);
            }
        }
        Op::LogSoftmax { x, axis } => {
            if req(*x) {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let total: T = (0..len).map(|j| g.data()[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = g.data()[idx(j)] - y[idx(j)].exp() * total;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(out.shape(), gx)?);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let shape = val(*x).shape();
            let d = *shape.last().expect("layer norm rank");
            let rows = numel(shape) / d;
            let gamma_v = gamma.map(val);
            if let Some(gm) = gamma {
                if req(*gm) {
                    let mut gg = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + g.data()[r * d + j] * xhat[r * d + j];
                        }
                    }
                    accumulate(grads, *gm, Tensor::new(&[d], gg)?);
                }
            }
            if let Some(bt) = beta {
                if req(*bt) {
                    let mut gb = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] = gb[j] + g.data()[r * d + j];
                        }
                    }
                    accumulate(grads, *bt, Tensor::new(&[d], gb)?);
                }
            }
            if req(*x) {
                let dn = T::of(d as f64);
                let mut gx = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let gh: Vec<T> = (0..d)
                        .map(|j| {
                            let scale = gamma_v.map_or(T::one(), |gm| gm.data()[j]);
                            g.data()[r * d + j] * scale
                        })
                        .collect();
                    let sum_gh: T = gh.iter().copied().sum();
                    let sum_ghx: T = (0..d).map(|j| gh[j] * xhat[r * d + j]).sum();
                    for j in 0..d {
                        gx[r * d + j] = inv_std[r] / dn
                            * (dn * gh[j] - sum_gh - xhat[r * d + j] * sum_ghx);
                    }
                }
                accumulate(grads, *x, Tensor::new(shape, gx)?);
            }
        }
        Op::Reshape(x) => {
            if req(*x) {
                accumulate(grads, *x, g.clone().reshape(val(*x).shape())?);
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = axis_split(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let ext = val(inp).shape()[*axis];
                if req(inp) {
                    let mut gi = Vec::with_capacity(val(inp).numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gi.extend_from_slice(&g.data()[start..start + ext * inner]);
                    }
                    accumulate(grads, inp, Tensor::new(val(inp).shape(), gi)?);
                }
                offset += ext;
            }
        }
        Op::Slice { x, axis, start } => {
            if req(*x) {
                let xs = val(*x).shape();
                let (outer, total, inner) = axis_split(xs, *axis);
                let len = out.shape()[*axis];
                let mut gx = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                accumulate(grads, *x, Tensor::new(xs, gx)?);
            }
        }
        Op::Sum(x) => {
            if req(*x) {
                accumulate(grads, *x, Tensor::full(val(*x).shape(), g.item()));
            }
        }
        Op::SumAxis { x, axis } => {
            if req(*x) {
                let xs = val(*x).shape();
                let (outer, len, inner) = axis_split(xs, *axis);
                let mut gx = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx[(o * len + j) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xs, gx)?);
            }
        }
        Op::StraightThrough(p) => {
            if req(*p) {
                accumulate(grads, *p, g.clone());
            }
        }
    }
    Ok(())
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn transpose2<T: Real>(data: &[T], rows: usize, cols: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    Tensor::new(&[cols, rows], out).expect("transpose")
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Scalar value as `f64`; panics unless the value has one element.
    pub fn item(&self) -> f64 {
        self.value().item().as_f64()
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn map_unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let v = self.value();
        let out = v.map(f);
        self.tape.push(out, op, self.requires_grad())
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            shape_err(
                name,
                format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
            )
        })?;
        let mut data = vec![T::zero(); numel(&shape)];
        if a.shape() == shape.as_slice() {
            for_each_offset(b.shape(), &shape, |i, off| data[i] = f(a.data()[i], b.data()[off]));
        } else {
            let mut a_off = vec![0; data.len()];
            for_each_offset(a.shape(), &shape, |i, off| a_off[i] = off);
            for_each_offset(b.shape(), &shape, |i, off| {
                data[i] = f(a.data()[a_off[i]], b.data()[off])
            });
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::new(&shape, data)?, op, rg))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn square(self) -> Var<'t, T> {
        self.mul(self).expect("square of itself")
    }

    pub fn neg(self) -> Var<'t, T> {
        self.map_unary(Op::Neg(self.id), |x| -x)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        self.map_unary(Op::AddScalar(self.id), move |x| x + c)
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        self.map_unary(Op::MulScalar(self.id, c), move |x| x * c)
    }

    /// `max(x, c)` elementwise; the gradient is zero wherever `x <= c`.
    pub fn clamp_min(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        self.map_unary(Op::ClampMin(self.id, c), move |x| x.max(c))
    }

    pub fn exp(self) -> Var<'t, T> {
        self.map_unary(Op::Exp(self.id), |x| x.exp())
    }

    pub fn ln(self) -> Var<'t, T> {
        self.map_unary(Op::Log(self.id), |x| x.ln())
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.map_unary(Op::Sqrt(self.id), |x| x.sqrt())
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.map_unary(Op::Tanh(self.id), |x| x.tanh())
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.map_unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.map_unary(Op::Softplus(self.id), softplus)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.map_unary(Op::Relu(self.id), |x| x.max(T::zero()))
    }

    pub fn silu(self) -> Var<'t, T> {
        self.map_unary(Op::Silu(self.id), |x| x * sigmoid(x))
    }

    /// Identical value, no gradient back to `self`.
    pub fn stop_gradient(self) -> Var<'t, T> {
        let mut v = self.value();
        match &mut *self.tape.stopped.borrow_mut() {
            Stopped::Pass => {}
            Stopped::Record(kept) => kept.push(v.clone()),
            Stopped::Replay(values) => match values.next() {
                Some(r) if r.shape() == v.shape() => v = r,
                _ => panic!("stop_gradient replay out of step with the recorded pass"),
            },
        }
        self.tape.push_arc(v, Op::Leaf, false)
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), &mut out, false);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push(Tensor::new(&[m, n], out)?, Op::MatMul(self.id, other.id), rg))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(shape_err("transpose", format!("rank-2 expected, got {:?}", v.shape())));
        }
        let out = transpose2(v.data(), v.shape()[0], v.shape()[1]);
        Ok(self.tape.push(out, Op::Transpose(self.id), self.requires_grad()))
    }

    /// `x w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn dense(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        if x.rank() != 2 || wv.rank() != 2 || x.shape()[1] != wv.shape()[0] {
            return Err(shape_err(
                "dense",
                format!("input {:?} vs weight {:?}", x.shape(), wv.shape()),
            ));
        }
        let (n, i, o) = (x.shape()[0], x.shape()[1], wv.shape()[1]);
        let mut out = vec![T::zero(); n * o];
        gemm(MatRef::new(x.data(), n, i), MatRef::new(wv.data(), i, o), &mut out, false);
        if let Some(b) = b {
            let bv = b.value();
            if bv.shape() != [o] {
                return Err(shape_err("dense", format!("bias {:?} for {o} outputs", bv.shape())));
            }
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v = *v + bb;
                }
            }
        }
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        let op = Op::Dense {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
        };
        Ok(self.tape.push(Tensor::new(&[n, o], out)?, op, rg))
    }

    /// 2-D cross-correlation of NCHW input with an OIHW kernel.
    pub fn conv2d(
        self,
        kernel: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), kernel.value());
        let geom = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
        let bias_v = bias.map(|b| b.value());
        if let Some(bv) = &bias_v {
            if bv.shape() != [geom.out_channels] {
                return Err(shape_err("conv2d", format!("bias shape {:?}", bv.shape())));
            }
        }
        let out = conv::conv2d_forward(&geom, x.data(), w.data(), bias_v.as_deref().map(|b| b.data()));
        let rg = self.requires_grad()
            || kernel.requires_grad()
            || bias.is_some_and(|b| b.requires_grad());
        let op = Op::Conv2d {
            x: self.id,
            w: kernel.id,
            b: bias.map(|b| b.id),
            geom,
        };
        Ok(self.tape.push(Tensor::new(&geom.output_shape(), out)?, op, rg))
    }

    /// Transposed convolution; `kernel` is `[in_channels, out_channels, kh, kw]`.
    pub fn conv_transpose2d(
        self,
        kernel: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), kernel.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
            return Err(shape_err(
                "conv_transpose2d",
                format!("input {xs:?} vs kernel {ws:?}"),
            ));
        }
        let oh = conv::conv_transpose_out(xs[2], ws[2], stride.0, padding.0);
        let ow = conv::conv_transpose_out(xs[3], ws[3], stride.1, padding.1);
        let (oh, ow) = match (oh, ow) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => {
                return Err(shape_err(
                    "conv_transpose2d",
                    format!("non-positive output extent for input {xs:?}, kernel {ws:?}"),
                ))
            }
        };
        let geom = ConvGeometry::new(&[xs[0], ws[1], oh, ow], &[ws[0], ws[1], ws[2], ws[3]], stride, padding)?;
        debug_assert_eq!((geom.out_h(), geom.out_w()), (xs[2], xs[3]));
        let mut out = conv::conv2d_backward_input(&geom, x.data(), w.data());
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [ws[1]] {
                return Err(shape_err("conv_transpose2d", format!("bias shape {:?}", bv.shape())));
            }
            for (i, chan) in out.chunks_mut(oh * ow).enumerate() {
                let bb = bv.data()[i % ws[1]];
                chan.iter_mut().for_each(|v| *v = *v + bb);
            }
        }
        let rg = self.requires_grad()
            || kernel.requires_grad()
            || bias.is_some_and(|b| b.requires_grad());
        let op = Op::ConvTranspose2d {
            x: self.id,
            w: kernel.id,
            b: bias.map(|b| b.id),
            geom,
        };
        Ok(self.tape.push(Tensor::new(&[xs[0], ws[1], oh, ow], out)?, op, rg))
    }

    fn check_axis(&self, axis: usize, name: &'static str) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(shape_err(name, format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(shape)
    }

    /// Softmax along `axis`, stabilised by subtracting the per-slice max.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.check_axis(axis, "softmax")?;
        let x = self.value();
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut y = vec![T::zero(); x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| x.data()[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (x.data()[idx(j)] - m).exp();
                    y[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    y[idx(j)] = y[idx(j)] / total;
                }
            }
        }
        let op = Op::Softmax { x: self.id, axis };
        Ok(self.tape.push(Tensor::new(&shape, y)?, op, self.requires_grad()))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.check_axis(axis, "log_softmax")?;
        let x = self.value();
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut y = vec![T::zero(); x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| x.data()[idx(j)]).fold(T::neg_infinity(), T::max);
                let lse = m + (0..len).map(|j| (x.data()[idx(j)] - m).exp()).sum::<T>().ln();
                for j in 0..len {
                    y[idx(j)] = x.data()[idx(j)] - lse;
                }
            }
        }
        let op = Op::LogSoftmax { x: self.id, axis };
        Ok(self.tape.push(Tensor::new(&shape, y)?, op, self.requires_grad()))
    }

    /// Normalises over the last axis, then applies optional gain and shift.
    pub fn layer_norm(
        self,
        gamma: Option<Var<'t, T>>,
        beta: Option<Var<'t, T>>,
        eps: f64,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        for p in [gamma, beta].into_iter().flatten() {
            if p.shape() != [d] {
                return Err(shape_err("layer_norm", format!("param {:?} for width {d}", p.shape())));
            }
        }
        let rows = x.numel() / d;
        let (gv, bv) = (gamma.map(|g| g.value()), beta.map(|b| b.value()));
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.numel()];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + T::of(eps)).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                let gj = gv.as_ref().map_or(T::one(), |g| g.data()[j]);
                let bj = bv.as_ref().map_or(T::zero(), |b| b.data()[j]);
                y[r * d + j] = h * gj + bj;
            }
        }
        let rg = self.requires_grad()
            || gamma.is_some_and(|g| g.requires_grad())
            || beta.is_some_and(|b| b.requires_grad());
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.map(|g| g.id),
            beta: beta.map(|b| b.id),
            xhat,
            inv_std,
        };
        Ok(self.tape.push(Tensor::new(x.shape(), y)?, op, rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let out = (*v).clone().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id), self.requires_grad()))
    }

    pub fn concat(vars: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = vars
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = first.check_axis(axis, "concat")?;
        let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = vars.iter().any(|v| v.requires_grad());
        let op = Op::Concat {
            inputs: vars.iter().map(|v| v.id).collect(),
            axis,
        };
        Ok(first.tape.push(Tensor::new(&shape, data)?, op, rg))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let xs = self.check_axis(axis, "slice")?;
        if start + len > xs[axis] {
            return Err(shape_err(
                "slice",
                format!("range {start}..{} exceeds extent {} of {xs:?}", start + len, xs[axis]),
            ));
        }
        let x = self.value();
        let (outer, total, inner) = axis_split(&xs, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            data.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut shape = xs.clone();
        shape[axis] = len;
        let op = Op::Slice {
            x: self.id,
            axis,
            start,
        };
        Ok(self.tape.push(Tensor::new(&shape, data)?, op, self.requires_grad()))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Var<'t, T> {
        let total = self.value().sum();
        self.tape
            .push(Tensor::scalar(total), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let xs = self.check_axis(axis, "sum_axis")?;
        let x = self.value();
        let (outer, len, inner) = axis_split(&xs, axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    let d = &mut data[o * inner + i];
                    *d = *d + x.data()[(o * len + j) * inner + i];
                }
            }
        }
        let mut shape = xs.clone();
        shape.remove(axis);
        let op = Op::SumAxis { x: self.id, axis };
        Ok(self.tape.push(Tensor::new(&shape, data)?, op, self.requires_grad()))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let len = self.check_axis(axis, "mean_axis")?[axis] as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len))
    }

    /// Draws a one-hot sample from the categorical distributions along the last
    /// axis of `self` (probabilities). The value is exactly one-hot; the
    /// gradient passes straight through to the probabilities.
    pub fn categorical_st<R: Rng + ?Sized>(self, rng: &mut R) -> Result<Var<'t, T>> {
        let p = self.value();
        let c = *p
            .shape()
            .last()
            .ok_or_else(|| shape_err("categorical_st", "scalar input"))?;
        let mut out = vec![T::zero(); p.numel()];
        for (row, dst) in p.data().chunks(c).zip(out.chunks_mut(c)) {
            dst[sample_index(row, rng)] = T::one();
        }
        let op = Op::StraightThrough(self.id);
        Ok(self.tape.push(Tensor::new(p.shape(), out)?, op, self.requires_grad()))
    }
}

/// Index drawn from unnormalised non-negative `weights` by inverse CDF.
pub fn sample_index<T: Real, R: Rng + ?Sized>(weights: &[T], rng: &mut R) -> usize {
    let total: f64 = weights.iter().map(|w| w.as_f64()).sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w.as_f64();
        if u < acc {
            return i;
        }
    }
    // Rounding can leave u == total; fall back to the last positive weight.
    weights
        .iter()
        .rposition(|w| w.as_f64() > 0.0)
        .unwrap_or(weights.len() - 1)
}
