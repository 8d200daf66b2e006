//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation records its output value and the ids of its inputs on a
//! [`Tape`]. [`Tape::backward`] walks the tape in reverse and accumulates
//! exact gradients for every node that depends on a leaf.
//!
//! Matrix products (including the ones inside the fused attention op) add
//! their multiply-accumulate cost to a FLOP counter, which the analytic
//! FLOP model is checked against.

use std::cell::{Cell, Ref, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};
use crate::scalar::{order_free_sum, Scalar};
use crate::tensor::Tensor;

/// Sentinel in gather indices meaning "write zero".
pub const ZERO_INDEX: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Ln,
    Softplus,
    Relu,
    Gelu,
    Sigmoid,
    Abs,
    Sqrt,
    Square,
}

/// Key grouping used by the fused attention op.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    /// Every query attends to every key. Keys are reduced group by group and
    /// group partials are combined order-independently, so permuting groups
    /// permutes the output bit-exactly.
    Global(Vec<usize>),
    /// Queries attend only to keys of their own group (`Tq == Tk`).
    BlockDiagonal(Vec<usize>),
}

impl AttentionMask {
    fn groups(&self) -> &[usize] {
        match self {
            AttentionMask::Global(g) | AttentionMask::BlockDiagonal(g) => g,
        }
    }
}

enum Op<T> {
    Leaf,
    Constant,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Binary(BinaryOp, usize, usize),
    Unary(UnaryOp, usize),
    Scale(usize, T),
    AddScalar(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    SoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        inv_std: Vec<T>,
    },
    L2NormalizeRows {
        x: usize,
        inv_norm: Vec<T>,
    },
    Gather {
        x: usize,
        index: Vec<u32>,
    },
    Reshape(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        mask: AttentionMask,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    flops: Cell<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of the right shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    fn dim(x: usize, y: usize) -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    }
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

#[inline]
fn bidx(shape: (usize, usize), r: usize, c: usize) -> usize {
    let rr = if shape.0 == 1 { 0 } else { r };
    let cc = if shape.1 == 1 { 0 } else { c };
    rr * shape.1 + cc
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)`, stable for large |x|.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(GELU_A);
    let inner = k * (x + a * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    T::lit(0.5) * (T::one() + th)
        + T::lit(0.5) * x * sech2 * k * (T::one() + T::lit(3.0) * a * x * x)
}

fn unary_forward<T: Scalar>(op: UnaryOp, x: T) -> T {
    match op {
        UnaryOp::Neg => -x,
        UnaryOp::Exp => x.exp(),
        UnaryOp::Ln => x.ln(),
        UnaryOp::Softplus => softplus(x),
        UnaryOp::Relu => x.max(T::zero()),
        UnaryOp::Gelu => gelu(x),
        UnaryOp::Sigmoid => sigmoid(x),
        UnaryOp::Abs => x.abs(),
        UnaryOp::Sqrt => x.sqrt(),
        UnaryOp::Square => x * x,
    }
}

fn unary_backward<T: Scalar>(op: UnaryOp, x: T, y: T, g: T) -> T {
    match op {
        UnaryOp::Neg => -g,
        UnaryOp::Exp => g * y,
        UnaryOp::Ln => g / x,
        UnaryOp::Softplus => g * sigmoid(x),
        UnaryOp::Relu => {
            if x > T::zero() {
                g
            } else {
                T::zero()
            }
        }
        UnaryOp::Gelu => g * gelu_grad(x),
        UnaryOp::Sigmoid => g * y * (T::one() - y),
        UnaryOp::Abs => {
            if x > T::zero() {
                g
            } else if x < T::zero() {
                -g
            } else {
                T::zero()
            }
        }
        UnaryOp::Sqrt => g / (T::lit(2.0) * y),
        UnaryOp::Square => T::lit(2.0) * x * g,
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            flops: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-add FLOPs (2 per MAC) recorded by matrix products so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    pub fn reset_flops(&self) {
        self.flops.set(0);
    }

    fn add_flops(&self, n: u64) {
        self.flops.set(self.flops.get() + n);
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// A differentiable input (parameters).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, var: Var<'_, T>) -> Tensor<T> {
        self.nodes.borrow()[var.id].value.clone()
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse-mode sweep from a 1x1 root.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let (rows, cols) = nodes[root.id].value.shape();
        if rows != 1 || cols != 1 {
            return Err(Error::NonScalarRoot { rows, cols });
        }
        if !nodes[root.id].value.item().is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::scalar(T::one()));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

trait NodeSliceExt<T> {
    fn value_of(&self, id: usize) -> &Tensor<T>;
}

impl<T> NodeSliceExt<T> for [Node<T>] {
    fn value_of(&self, id: usize) -> &Tensor<T> {
        &self[id].value
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    delta: Tensor<T>,
) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let y = &node.value;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (nodes.value_of(*a), nodes.value_of(*b));
            if nodes[*a].needs_grad {
                accumulate(nodes, grads, *a, g.matmul_t(bv));
            }
            if nodes[*b].needs_grad {
                accumulate(nodes, grads, *b, av.t_matmul(g));
            }
        }
        Op::MatMulT(a, b) => {
            // y = a b^T
            let (av, bv) = (nodes.value_of(*a), nodes.value_of(*b));
            if nodes[*a].needs_grad {
                accumulate(nodes, grads, *a, g.matmul(bv));
            }
            if nodes[*b].needs_grad {
                accumulate(nodes, grads, *b, g.t_matmul(av));
            }
        }
        Op::Binary(op, a, b) => {
            let (av, bv) = (nodes.value_of(*a), nodes.value_of(*b));
            let (sa, sb) = (av.shape(), bv.shape());
            let mut ga = Tensor::zeros(sa.0, sa.1);
            let mut gb = Tensor::zeros(sb.0, sb.1);
            let (ad, bd) = (av.data(), bv.data());
            for r in 0..y.rows() {
                for c in 0..y.cols() {
                    let gv = g.get(r, c);
                    let (ia, ib) = (bidx(sa, r, c), bidx(sb, r, c));
                    let (da, db) = match op {
                        BinaryOp::Add => (gv, gv),
                        BinaryOp::Sub => (gv, -gv),
                        BinaryOp::Mul => (gv * bd[ib], gv * ad[ia]),
                        BinaryOp::Div => (gv / bd[ib], -gv * ad[ia] / (bd[ib] * bd[ib])),
                    };
                    ga.data_mut()[ia] += da;
                    gb.data_mut()[ib] += db;
                }
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Unary(op, x) => {
            let xv = nodes.value_of(*x);
            let data = xv
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| unary_backward(*op, xi, yi, gi))
                .collect();
            accumulate(
                nodes,
                grads,
                *x,
                Tensor::from_vec(xv.rows(), xv.cols(), data),
            );
        }
        Op::Scale(x, s) => accumulate(nodes, grads, *x, g.map(|v| v * *s)),
        Op::AddScalar(x) => accumulate(nodes, grads, *x, g.clone()),
        Op::Sum(x) => {
            let (r, c) = nodes.value_of(*x).shape();
            accumulate(nodes, grads, *x, Tensor::filled(r, c, g.item()));
        }
        Op::SumRows(x) => {
            let (r, c) = nodes.value_of(*x).shape();
            accumulate(nodes, grads, *x, Tensor::from_fn(r, c, |i, _| g.get(i, 0)));
        }
        Op::SumCols(x) => {
            let (r, c) = nodes.value_of(*x).shape();
            accumulate(nodes, grads, *x, Tensor::from_fn(r, c, |_, j| g.get(0, j)));
        }
        Op::SoftmaxRows(x) => {
            let (r, c) = y.shape();
            let mut dx = Tensor::zeros(r, c);
            for i in 0..r {
                let dot: T = (0..c).map(|j| g.get(i, j) * y.get(i, j)).sum();
                for j in 0..c {
                    dx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::LayerNormRows { x, inv_std } => {
            let (r, c) = y.shape();
            let n = T::from_usize_lossy(c);
            let mut dx = Tensor::zeros(r, c);
            for i in 0..r {
                let mean_g: T = (0..c).map(|j| g.get(i, j)).sum::<T>() / n;
                let mean_gy: T = (0..c).map(|j| g.get(i, j) * y.get(i, j)).sum::<T>() / n;
                for j in 0..c {
                    dx.set(
                        i,
                        j,
                        inv_std[i] * (g.get(i, j) - mean_g - y.get(i, j) * mean_gy),
                    );
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::L2NormalizeRows { x, inv_norm } => {
            let (r, c) = y.shape();
            let mut dx = Tensor::zeros(r, c);
            for i in 0..r {
                // y = x / n, n = sqrt(|x|^2 + eps)
                let dot: T = (0..c).map(|j| g.get(i, j) * y.get(i, j)).sum();
                for j in 0..c {
                    dx.set(i, j, inv_norm[i] * (g.get(i, j) - y.get(i, j) * dot));
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Gather { x, index } => {
            let (r, c) = nodes.value_of(*x).shape();
            let mut dx = Tensor::zeros(r, c);
            for (o, &src) in index.iter().enumerate() {
                if src != ZERO_INDEX {
                    dx.data_mut()[src as usize] += g.data()[o];
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Reshape(x) => {
            let (r, c) = nodes.value_of(*x).shape();
            accumulate(nodes, grads, *x, Tensor::from_vec(r, c, g.data().to_vec()));
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &id in ids {
                let (r, c) = nodes.value_of(id).shape();
                let part = Tensor::from_vec(r, c, g.data()[offset..offset + r * c].to_vec());
                offset += r * c;
                accumulate(nodes, grads, id, part);
            }
        }
        Op::ConcatCols(ids) => {
            let mut offset = 0;
            for &id in ids {
                let (r, c) = nodes.value_of(id).shape();
                let part = Tensor::from_fn(r, c, |i, j| g.get(i, offset + j));
                offset += c;
                accumulate(nodes, grads, id, part);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            mask,
            probs,
        } => {
            let (qv, kv, vv) = (nodes.value_of(*q), nodes.value_of(*k), nodes.value_of(*v));
            let (tq, d) = qv.shape();
            let dv = vv.cols();
            let mut dq = Tensor::zeros(tq, d);
            let mut dk = Tensor::zeros(kv.rows(), d);
            let mut dvv = Tensor::zeros(vv.rows(), dv);
            let ranges = key_ranges(mask, tq, kv.rows());
            let mut dp = Vec::new();
            for i in 0..tq {
                let (lo, hi) = ranges[i];
                dp.clear();
                let gi = g.row(i);
                for j in lo..hi {
                    let p = probs.get(i, j);
                    let vj = vv.row(j);
                    let mut acc = T::zero();
                    for c in 0..dv {
                        acc += gi[c] * vj[c];
                        dvv.data_mut()[j * dv + c] += p * gi[c];
                    }
                    dp.push(acc);
                }
                let dot: T = (lo..hi).map(|j| probs.get(i, j) * dp[j - lo]).sum();
                for j in lo..hi {
                    let ds = probs.get(i, j) * (dp[j - lo] - dot);
                    for c in 0..d {
                        dq.data_mut()[i * d + c] += ds * kv.get(j, c);
                        dk.data_mut()[j * d + c] += ds * qv.get(i, c);
                    }
                }
            }
            accumulate(nodes, grads, *q, dq);
            accumulate(nodes, grads, *k, dk);
            accumulate(nodes, grads, *v, dvv);
        }
    }
}

/// Per-query key range `[lo, hi)`; global attention spans all keys.
fn key_ranges(mask: &AttentionMask, tq: usize, tk: usize) -> Vec<(usize, usize)> {
    match mask {
        AttentionMask::Global(_) => vec![(0, tk); tq],
        AttentionMask::BlockDiagonal(groups) => {
            let mut out = Vec::with_capacity(tq);
            let mut lo = 0;
            for &g in groups {
                for _ in 0..g {
                    out.push((lo, lo + g));
                }
                lo += g;
            }
            out
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(*self)
    }

    pub fn item(&self) -> T {
        self.tape.value_ref(self.id).item()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value_ref(self.id).shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    fn unary_op(self, op: UnaryOp) -> Self {
        let value = self.tape.value_ref(self.id).map(|x| unary_forward(op, x));
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, Op::Unary(op, self.id), needs)
    }

    fn binary_op(self, op: BinaryOp, other: Self) -> Self {
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            let (sa, sb) = (a.shape(), b.shape());
            let shape = broadcast_shape(sa, sb)
                .unwrap_or_else(|| panic!("cannot broadcast {sa:?} with {sb:?} in {op:?}"));
            Tensor::from_fn(shape.0, shape.1, |r, c| {
                let (x, y) = (a.data()[bidx(sa, r, c)], b.data()[bidx(sb, r, c)]);
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                }
            })
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape
            .push(out, Op::Binary(op, self.id, other.id), needs)
    }

    pub fn matmul(self, other: Self) -> Self {
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            self.tape
                .add_flops(2 * (a.rows() * a.cols() * b.cols()) as u64);
            a.matmul(&b)
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape.push(out, Op::MatMul(self.id, other.id), needs)
    }

    /// `self * other^T`.
    pub fn matmul_t(self, other: Self) -> Self {
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            self.tape
                .add_flops(2 * (a.rows() * a.cols() * b.rows()) as u64);
            a.matmul_t(&b)
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape.push(out, Op::MatMulT(self.id, other.id), needs)
    }

    pub fn scale(self, s: T) -> Self {
        let value = self.tape.value_ref(self.id).map(|x| x * s);
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, Op::Scale(self.id, s), needs)
    }

    pub fn add_scalar(self, s: T) -> Self {
        let value = self.tape.value_ref(self.id).map(|x| x + s);
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, Op::AddScalar(self.id), needs)
    }

    pub fn exp(self) -> Self {
        self.unary_op(UnaryOp::Exp)
    }
    pub fn ln(self) -> Self {
        self.unary_op(UnaryOp::Ln)
    }
    pub fn softplus(self) -> Self {
        self.unary_op(UnaryOp::Softplus)
    }
    pub fn relu(self) -> Self {
        self.unary_op(UnaryOp::Relu)
    }
    pub fn gelu(self) -> Self {
        self.unary_op(UnaryOp::Gelu)
    }
    pub fn sigmoid(self) -> Self {
        self.unary_op(UnaryOp::Sigmoid)
    }
    pub fn abs(self) -> Self {
        self.unary_op(UnaryOp::Abs)
    }
    pub fn sqrt(self) -> Self {
        self.unary_op(UnaryOp::Sqrt)
    }
    pub fn square(self) -> Self {
        self.unary_op(UnaryOp::Square)
    }

    /// Sum of all entries, as a 1x1.
    pub fn sum(self) -> Self {
        let value = Tensor::scalar(self.tape.value_ref(self.id).sum());
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, Op::Sum(self.id), needs)
    }

    pub fn mean(self) -> Self {
        let n = self.tape.value_ref(self.id).len();
        self.sum().scale(T::one() / T::from_usize_lossy(n.max(1)))
    }

    /// Row sums, `m x n -> m x 1`.
    pub fn sum_rows(self) -> Self {
        let value = {
            let x = self.tape.value_ref(self.id);
            Tensor::from_fn(x.rows(), 1, |r, _| x.row(r).iter().copied().sum())
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, Op::SumRows(self.id), needs)
    }

    /// Column sums, `m x n -> 1 x n`.
    pub fn sum_cols(self) -> Self {
        let value = {
            let x = self.tape.value_ref(self.id);
            let mut out = Tensor::zeros(1, x.cols());
            for r in 0..x.rows() {
                for c in 0..x.cols() {
                    out.data_mut()[c] += x.get(r, c);
                }
            }
            out
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, Op::SumCols(self.id), needs)
    }

    pub fn softmax_rows(self) -> Self {
        let value = {
            let x = self.tape.value_ref(self.id);
            let mut out = Tensor::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let row = x.row(r);
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
                let z: T = e.iter().copied().sum();
                for (c, ev) in e.into_iter().enumerate() {
                    out.set(r, c, ev / z);
                }
            }
            out
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, Op::SoftmaxRows(self.id), needs)
    }

    /// Zero-mean, unit-variance rows (no affine part).
    pub fn layer_norm_rows(self, eps: T) -> Self {
        let (value, inv_std) = {
            let x = self.tape.value_ref(self.id);
            let n = T::from_usize_lossy(x.cols());
            let mut out = Tensor::zeros(x.rows(), x.cols());
            let mut inv_std = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let row = x.row(r);
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let is = T::one() / (var + eps).sqrt();
                for (c, &v) in row.iter().enumerate() {
                    out.set(r, c, (v - mean) * is);
                }
                inv_std.push(is);
            }
            (out, inv_std)
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(
            value,
            Op::LayerNormRows {
                x: self.id,
                inv_std,
            },
            needs,
        )
    }

    /// Rows scaled to unit l2 norm: `x / sqrt(|x|^2 + eps)`.
    pub fn l2_normalize_rows(self, eps: T) -> Self {
        let (value, inv_norm) = {
            let x = self.tape.value_ref(self.id);
            let mut out = Tensor::zeros(x.rows(), x.cols());
            let mut inv_norm = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let row = x.row(r);
                let s: T = row.iter().map(|&v| v * v).sum();
                let inv = T::one() / (s + eps).sqrt();
                for (c, &v) in row.iter().enumerate() {
                    out.set(r, c, v * inv);
                }
                inv_norm.push(inv);
            }
            (out, inv_norm)
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(
            value,
            Op::L2NormalizeRows {
                x: self.id,
                inv_norm,
            },
            needs,
        )
    }

    /// `out.data[i] = self.data[index[i]]`, or zero for [`ZERO_INDEX`].
    pub fn gather(self, index: Vec<u32>, rows: usize, cols: usize) -> Self {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let value = {
            let x = self.tape.value_ref(self.id);
            let src = x.data();
            let data = index
                .iter()
                .map(|&i| {
                    if i == ZERO_INDEX {
                        T::zero()
                    } else {
                        src[i as usize]
                    }
                })
                .collect();
            Tensor::from_vec(rows, cols, data)
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape
            .push(value, Op::Gather { x: self.id, index }, needs)
    }

    pub fn gather_rows(self, rows: &[usize]) -> Self {
        let cols = self.cols();
        let index = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| (r * cols + c) as u32))
            .collect();
        self.gather(index, rows.len(), cols)
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Self {
        let rows: Vec<usize> = (start..start + len).collect();
        self.gather_rows(&rows)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Self {
        let (r, c) = self.shape();
        assert!(start + len <= c);
        let index = (0..r)
            .flat_map(|i| (start..start + len).map(move |j| (i * c + j) as u32))
            .collect();
        self.gather(index, r, len)
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Self {
        let value = {
            let x = self.tape.value_ref(self.id);
            assert_eq!(x.len(), rows * cols, "reshape size");
            Tensor::from_vec(rows, cols, x.data().to_vec())
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, Op::Reshape(self.id), needs)
    }

    pub fn concat_rows(parts: &[Self]) -> Self {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let cols = tape.value_ref(ids[0]).cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for &id in &ids {
                let v = tape.value_ref(id);
                assert_eq!(v.cols(), cols, "concat_rows column mismatch");
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::from_vec(rows, cols, data)
        };
        let needs = tape.needs(&ids);
        tape.push(value, Op::ConcatRows(ids), needs)
    }

    pub fn concat_cols(parts: &[Self]) -> Self {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let rows = tape.value_ref(ids[0]).rows();
            let vals: Vec<Ref<'_, Tensor<T>>> = ids.iter().map(|&id| tape.value_ref(id)).collect();
            let cols: usize = vals.iter().map(|v| v.cols()).sum();
            let mut out = Tensor::zeros(rows, cols);
            let mut offset = 0;
            for v in &vals {
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                for r in 0..rows {
                    for c in 0..v.cols() {
                        out.set(r, offset + c, v.get(r, c));
                    }
                }
                offset += v.cols();
            }
            out
        };
        let needs = tape.needs(&ids);
        tape.push(value, Op::ConcatCols(ids), needs)
    }

    /// Fused `softmax(q k^T) v` for one head. No scaling is applied; fold any
    /// temperature into `q` beforehand.
    pub fn attention(q: Self, k: Self, v: Self, mask: AttentionMask) -> Self {
        let tape = q.tape;
        let (value, probs) = {
            let (qv, kv, vv) = (
                tape.value_ref(q.id),
                tape.value_ref(k.id),
                tape.value_ref(v.id),
            );
            let (tq, d) = qv.shape();
            let tk = kv.rows();
            assert_eq!(kv.cols(), d, "attention key width");
            assert_eq!(vv.rows(), tk, "attention value count");
            let groups = mask.groups();
            assert_eq!(
                groups.iter().sum::<usize>(),
                tk,
                "attention groups must cover keys"
            );
            if let AttentionMask::BlockDiagonal(_) = mask {
                assert_eq!(tq, tk, "block-diagonal attention needs square scores");
            }
            let dv = vv.cols();
            let ranges = key_ranges(&mask, tq, tk);
            let mut probs = Tensor::zeros(tq, tk);
            let mut out = Tensor::zeros(tq, dv);
            let mut pairs = 0u64;
            let mut partials: Vec<T> = Vec::with_capacity(groups.len());
            let mut col_partials: Vec<Vec<T>> = vec![Vec::with_capacity(groups.len()); dv];
            for i in 0..tq {
                let (lo, hi) = ranges[i];
                pairs += (hi - lo) as u64;
                let qi = qv.row(i);
                let mut m = T::neg_infinity();
                for j in lo..hi {
                    let s: T = qi
                        .iter()
                        .zip(kv.row(j))
                        .map(|(&a, &b)| a * b)
                        .fold(T::zero(), |acc, x| acc + x);
                    probs.set(i, j, s);
                    m = m.max(s);
                }
                // Group-wise partial sums, then an order-free combination.
                partials.clear();
                let mut start = 0;
                for &g in groups {
                    let (glo, ghi) = (start, start + g);
                    start += g;
                    let (a, b) = (glo.max(lo), ghi.min(hi));
                    if a >= b {
                        continue;
                    }
                    let mut z = T::zero();
                    for j in a..b {
                        let e = (probs.get(i, j) - m).exp();
                        probs.set(i, j, e);
                        z += e;
                    }
                    partials.push(z);
                }
                let z = order_free_sum(&mut partials);
                for j in lo..hi {
                    probs.set(i, j, probs.get(i, j) / z);
                }
                for cp in col_partials.iter_mut() {
                    cp.clear();
                }
                let mut start = 0;
                for &g in groups {
                    let (glo, ghi) = (start, start + g);
                    start += g;
                    let (a, b) = (glo.max(lo), ghi.min(hi));
                    if a >= b {
                        continue;
                    }
                    for (c, cp) in col_partials.iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for j in a..b {
                            acc += probs.get(i, j) * vv.get(j, c);
                        }
                        cp.push(acc);
                    }
                }
                for (c, cp) in col_partials.iter_mut().enumerate() {
                    out.set(i, c, order_free_sum(cp));
                }
            }
            tape.add_flops(2 * pairs * d as u64 + 2 * pairs * dv as u64);
            (out, probs)
        };
        let needs = tape.needs(&[q.id, k.id, v.id]);
        tape.push(
            value,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                mask,
                probs,
            },
            needs,
        )
    }
}

impl<'t, T: Scalar> Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Self {
        self.binary_op(BinaryOp::Add, rhs)
    }
}

impl<'t, T: Scalar> Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self {
        self.binary_op(BinaryOp::Sub, rhs)
    }
}

impl<'t, T: Scalar> Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self {
        self.binary_op(BinaryOp::Mul, rhs)
    }
}

impl<'t, T: Scalar> Div for Var<'t, T> {
    type Output = Var<'t, T>;
    fn div(self, rhs: Self) -> Self {
        self.binary_op(BinaryOp::Div, rhs)
    }
}

impl<'t, T: Scalar> Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self {
        self.unary_op(UnaryOp::Neg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(
        build: impl for<'a> Fn(&'a Tape<f64>, Var<'a, f64>) -> Var<'a, f64>,
        x0: Tensor<f64>,
    ) {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&tape, x);
        let grads = tape.backward(y).unwrap();
        let g = grads.get_or_zeros(x);
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let t = Tape::new();
                let v = t.leaf(xp);
                build(&t, v).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "coord {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(rows, cols, |_, _| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let tape = Tape::new();
        let p = tape.leaf(sample(1, 5, 3));
        let loss = p.square().sum().scale(0.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get_or_zeros(p), p.value());
    }

    #[test]
    fn unrelated_leaf_gets_no_gradient() {
        let tape = Tape::new();
        let p = tape.leaf(sample(2, 2, 1));
        let q = tape.leaf(sample(2, 2, 2));
        let loss = q.sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(p).is_none());
        assert_eq!(g.get_or_zeros(p), Tensor::zeros(2, 2));
        let _ = p;
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let p = tape.leaf(sample(2, 2, 1));
        assert!(matches!(tape.backward(p), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let w = sample(3, 4, 9);
        fd_check(
            move |t, x| {
                let c = t.constant(w.clone());
                let b = t.constant(Tensor::from_fn(1, 4, |_, j| 0.5 + j as f64));
                let y = (x * c + b).gelu().softplus() + x.sigmoid() * x.abs();
                let z = (y / b).square().sum_rows().sqrt().sum() + y.sum_cols().exp().mean();
                z + x.add_scalar(3.0).ln().sum()
            },
            sample(3, 4, 4),
        );
    }

    #[test]
    fn normalization_and_softmax_gradients() {
        let w = sample(5, 5, 2);
        fd_check(
            move |t, x| {
                let c = t.constant(w.clone());
                let a = x.layer_norm_rows(1e-5).matmul(c);
                let b = x.l2_normalize_rows(1e-12).matmul_t(x).softmax_rows();
                (a * b).sum() + a.relu().mean()
            },
            sample(5, 5, 11),
        );
    }

    #[test]
    fn gather_concat_reshape_gradients() {
        fd_check(
            |_, x| {
                let g = x.gather(vec![0, 3, ZERO_INDEX, 3, 5, 1], 2, 3);
                let c = Var::concat_rows(&[g, x.slice_rows(1, 1).slice_cols(0, 3)]);
                let d = Var::concat_cols(&[
                    c,
                    c.reshape(3, 3).slice_rows(0, 3).gather_rows(&[2, 0, 1]),
                ]);
                (d.square() * d).sum()
            },
            sample(2, 3, 7),
        );
    }

    #[test]
    fn attention_matches_unfused_graph_and_gradients() {
        for mask in [
            AttentionMask::Global(vec![2, 3, 1]),
            AttentionMask::BlockDiagonal(vec![2, 3, 1]),
        ] {
            let tape = Tape::new();
            let q = tape.leaf(sample(6, 3, 1));
            let k = tape.leaf(sample(6, 3, 2));
            let v = tape.leaf(sample(6, 2, 3));
            let fused = Var::attention(q, k, v, mask.clone());
            // Reference through separate ops with an additive mask.
            let mut bias = Tensor::zeros(6, 6);
            if let AttentionMask::BlockDiagonal(groups) = &mask {
                let ranges = key_ranges(&mask, 6, 6);
                let _ = groups;
                for (i, &(lo, hi)) in ranges.iter().enumerate() {
                    for j in 0..6 {
                        if j < lo || j >= hi {
                            bias.set(i, j, -1e9);
                        }
                    }
                }
            }
            let reference = (q.matmul_t(k) + tape.constant(bias))
                .softmax_rows()
                .matmul(v);
            assert!(fused.value().max_abs_diff(&reference.value()) < 1e-12);

            let m = mask.clone();
            fd_check(
                move |t, x| {
                    let q = x.slice_cols(0, 3);
                    let k = x.slice_cols(3, 3).scale(0.7);
                    let v = x.slice_cols(6, 2);
                    let w = t.constant(sample(6, 2, 5));
                    (Var::attention(q, k, v, m.clone()) * w).sum()
                },
                sample(6, 8, 13),
            );
        }
    }

    #[test]
    fn global_attention_is_group_permutation_equivariant_bitwise() {
        let tape = Tape::new();
        let x = sample(7, 4, 21);
        let groups = vec![3, 2, 2];
        let perm_rows: Vec<usize> = vec![0, 1, 2, 5, 6, 3, 4];
        let a = tape.constant(x.clone());
        let b = tape.constant(x).gather_rows(&perm_rows);
        let oa = Var::attention(a, a, a, AttentionMask::Global(groups.clone()));
        let ob = Var::attention(b, b, b, AttentionMask::Global(vec![3, 2, 2]));
        let oa_perm = oa.gather_rows(&perm_rows);
        assert_eq!(oa_perm.value(), ob.value());
    }

    #[test]
    fn matmul_flops_are_counted() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(3, 4));
        let b = tape.constant(Tensor::zeros(4, 5));
        let _ = a.matmul(b);
        assert_eq!(tape.flops(), 2 * 3 * 4 * 5);
        tape.reset_flops();
        let q = tape.constant(Tensor::zeros(4, 2));
        let v = tape.constant(Tensor::zeros(4, 3));
        let _ = Var::attention(q, q, v, AttentionMask::BlockDiagonal(vec![2, 2]));
        assert_eq!(tape.flops(), 2 * 8 * 2 + 2 * 8 * 3);
    }
}
