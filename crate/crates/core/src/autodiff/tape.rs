use std::cell::RefCell;
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, mm, mm_nt, mm_tn, Tensor};

/// A value recorded on a [`Tape`], together with its gradient slot.
#[derive(Clone, Debug)]
pub struct DiffTensor<T> {
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub grad: Option<Tensor<T>>,
}

/// Backward rule for an operation whose gradient is not derived from its forward pass
/// (straight-through estimators and similar surrogates).
pub trait CustomBackward<T: Scalar>: Send {
    /// Returns one optional gradient per input, each with the input's element count.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &[T],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Shift(usize),
    Relu(usize),
    Gelu(usize),
    Abs(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { input: usize, rstd: Vec<T> },
    Sum(usize),
    Mean(usize),
    Transpose(usize),
    Reshape(usize),
    GatherRows { input: usize, index: Vec<usize> },
    GatherElements { input: usize, index: Vec<(usize, usize)> },
    SliceCols { input: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Custom { inputs: Vec<usize>, rule: Box<dyn CustomBackward<T>> },
}

struct Node<T: Scalar> {
    tensor: DiffTensor<T>,
    op: Op<T>,
}

struct Inner<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

/// Linear record of primitive operations. Nodes are appended in execution order and
/// `backward` walks them in exact reverse.
pub struct Tape<T: Scalar> {
    inner: RefCell<Inner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                backward_done: false,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all nodes so the tape can be reused.
    pub fn reset(&mut self) {
        let inner = self.inner.get_mut();
        inner.nodes.clear();
        inner.backward_done = false;
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        inner.nodes.push(Node {
            tensor: DiffTensor {
                value,
                requires_grad,
                grad: None,
            },
            op,
        });
        Var { tape: self, id }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, false, Op::Leaf)
    }

    fn owns(&self, v: Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::Detached)
        }
    }

    fn with<R>(&self, id: usize, f: impl FnOnce(&DiffTensor<T>) -> R) -> R {
        f(&self.inner.borrow().nodes[id].tensor)
    }

    pub fn value(&self, v: Var<'_, T>) -> Tensor<T> {
        self.with(v.id, |t| t.value.clone())
    }

    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.with(v.id, |t| t.grad.clone())
    }

    /// Records an operation with a hand-written backward rule.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t, T>],
        output: Tensor<T>,
        rule: Box<dyn CustomBackward<T>>,
    ) -> Result<Var<'t, T>> {
        for v in inputs {
            self.owns(*v)?;
        }
        let rg = inputs.iter().any(|v| v.requires_grad());
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(output, rg, Op::Custom { inputs: ids, rule }))
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let (value, rg) = {
            let inner = self.inner.borrow();
            let first = parts.first().ok_or_else(|| Error::Empty("concat_cols".into()))?;
            let rows = match inner.nodes[first.id].tensor.value.shape() {
                &[r, _] => r,
                s => return Err(Error::InvalidShape(s.to_vec(), "concat_cols expects matrices".into())),
            };
            let mut cols = 0;
            for p in parts {
                self.owns(*p)?;
                let s = inner.nodes[p.id].tensor.value.shape();
                if s.len() != 2 || s[0] != rows {
                    return Err(Error::Shape {
                        op: "concat_cols",
                        lhs: inner.nodes[first.id].tensor.value.shape().to_vec(),
                        rhs: s.to_vec(),
                    });
                }
                cols += s[1];
            }
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    out.extend_from_slice(inner.nodes[p.id].tensor.value.row(r));
                }
            }
            let rg = parts.iter().any(|p| inner.nodes[p.id].tensor.requires_grad);
            (Tensor::new(vec![rows, cols], out)?, rg)
        };
        Ok(self.push(value, rg, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let (value, rg) = {
            let inner = self.inner.borrow();
            let first = parts.first().ok_or_else(|| Error::Empty("concat_rows".into()))?;
            let cols = match inner.nodes[first.id].tensor.value.shape() {
                &[_, c] => c,
                s => return Err(Error::InvalidShape(s.to_vec(), "concat_rows expects matrices".into())),
            };
            let mut out = Vec::new();
            for p in parts {
                self.owns(*p)?;
                let t = &inner.nodes[p.id].tensor.value;
                if t.shape().len() != 2 || t.shape()[1] != cols {
                    return Err(Error::Shape {
                        op: "concat_rows",
                        lhs: inner.nodes[first.id].tensor.value.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                out.extend_from_slice(t.data());
            }
            let rg = parts.iter().any(|p| inner.nodes[p.id].tensor.requires_grad);
            let rows = out.len() / cols;
            (Tensor::new(vec![rows, cols], out)?, rg)
        };
        Ok(self.push(value, rg, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    /// Reverse pass from a scalar loss. Every `requires_grad` node ends up with a
    /// populated gradient (zeros when the loss does not depend on it). A second call
    /// without [`Tape::reset`] is an error.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        self.owns(loss)?;
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lt = &inner.nodes[loss.id].tensor.value;
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        if inner.nodes[loss.id].tensor.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&inner.nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in inner.nodes.iter_mut().zip(grads) {
            if node.tensor.requires_grad {
                let shape = node.tensor.value.shape().to_vec();
                let data = g.unwrap_or_else(|| vec![T::zero(); node.tensor.value.numel()]);
                node.tensor.grad = Some(Tensor::new(shape, data)?);
            }
        }
        inner.backward_done = true;
        Ok(())
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, contrib: Vec<T>) {
    if !nodes[id].tensor.requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Sums a full-shape gradient down to a trailing-broadcast operand.
fn reduce_to<T: Scalar>(g: &[T], len: usize) -> Vec<T> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); len];
    for chunk in g.chunks(len) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let out = &node.tensor.value;
    let val = |i: usize| &nodes[i].tensor.value;
    let rg = |i: usize| nodes[i].tensor.requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if rg(*a) {
                let mut ga = vec![T::zero(); m * k];
                mm_nt(g, val(*b).data(), &mut ga, m, k, n);
                accumulate(nodes, grads, *a, ga);
            }
            if rg(*b) {
                let mut gb = vec![T::zero(); k * n];
                mm_tn(val(*a).data(), g, &mut gb, m, k, n);
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Add(a, b) => {
            if rg(*a) {
                accumulate(nodes, grads, *a, g.to_vec());
            }
            if rg(*b) {
                accumulate(nodes, grads, *b, reduce_to(g, val(*b).numel()));
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                accumulate(nodes, grads, *a, g.to_vec());
            }
            if rg(*b) {
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                accumulate(nodes, grads, *b, reduce_to(&neg, val(*b).numel()));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let bl = bv.len();
            if rg(*a) {
                let ga = g.iter().enumerate().map(|(i, &x)| x * bv[i % bl]).collect();
                accumulate(nodes, grads, *a, ga);
            }
            if rg(*b) {
                let full: Vec<T> = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                accumulate(nodes, grads, *b, reduce_to(&full, bl));
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.iter().map(|&x| x * *s).collect()),
        Op::Shift(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Relu(a) => {
            let x = val(*a).data();
            let ga = g
                .iter()
                .zip(x)
                .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Gelu(a) => {
            let x = val(*a).data();
            let ga = g.iter().zip(x).map(|(&gi, &xi)| gi * gelu_grad(xi)).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Abs(a) => {
            let x = val(*a).data();
            let ga = g.iter().zip(x).map(|(&gi, &xi)| gi * sign(xi)).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Exp(a) => {
            let ga = g.iter().zip(out.data()).map(|(&gi, &yi)| gi * yi).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Log(a) => {
            let x = val(*a).data();
            let ga = g.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Sigmoid(a) => {
            let ga = g
                .iter()
                .zip(out.data())
                .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Softmax(a) => {
            let c = out.cols();
            let mut ga = vec![T::zero(); g.len()];
            for ((gr, yr), dr) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                let s = dot(gr, yr);
                for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = yi * (gi - s);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::LogSoftmax(a) => {
            let c = out.cols();
            let mut ga = vec![T::zero(); g.len()];
            for ((gr, yr), dr) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                let s: T = gr.iter().copied().sum();
                for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = gi - yi.exp() * s;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::LayerNorm { input, rstd } => {
            let c = out.cols();
            let cn = T::of_usize(c);
            let mut ga = vec![T::zero(); g.len()];
            for (r, ((gr, yr), dr)) in g
                .chunks(c)
                .zip(out.data().chunks(c))
                .zip(ga.chunks_mut(c))
                .enumerate()
            {
                let mg = gr.iter().copied().sum::<T>() / cn;
                let mgy = dot(gr, yr) / cn;
                for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = rstd[r] * (gi - mg - yi * mgy);
                }
            }
            accumulate(nodes, grads, *input, ga);
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, vec![g[0]; val(*a).numel()]),
        Op::Mean(a) => {
            let n = val(*a).numel();
            accumulate(nodes, grads, *a, vec![g[0] / T::of_usize(n); n]);
        }
        Op::Transpose(a) => {
            let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
            let mut ga = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = g[j * r + i];
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::GatherRows { input, index } => {
            let src = val(*input);
            let c = src.cols();
            let mut ga = vec![T::zero(); src.numel()];
            for (k, &r) in index.iter().enumerate() {
                for j in 0..c {
                    ga[r * c + j] += g[k * c + j];
                }
            }
            accumulate(nodes, grads, *input, ga);
        }
        Op::GatherElements { input, index } => {
            let src = val(*input);
            let c = src.cols();
            let mut ga = vec![T::zero(); src.numel()];
            for (k, &(r, j)) in index.iter().enumerate() {
                ga[r * c + j] += g[k];
            }
            accumulate(nodes, grads, *input, ga);
        }
        Op::SliceCols { input, start } => {
            let src = val(*input);
            let (rows, c) = (src.shape()[0], src.shape()[1]);
            let w = out.cols();
            let mut ga = vec![T::zero(); src.numel()];
            for r in 0..rows {
                ga[r * c + start..r * c + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            accumulate(nodes, grads, *input, ga);
        }
        Op::ConcatCols(parts) => {
            let rows = out.shape()[0];
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if rg(p) {
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(nodes, grads, p, gp);
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                if rg(p) {
                    accumulate(nodes, grads, p, g[offset..offset + n].to_vec());
                }
                offset += n;
            }
        }
        Op::Custom { inputs, rule } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
            let gs = rule.backward(&ins, out, g);
            for (&i, gi) in inputs.iter().zip(gs) {
                if let Some(gi) = gi {
                    assert_eq!(gi.len(), val(i).numel(), "custom backward gradient length");
                    accumulate(nodes, grads, i, gi);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let k = T::of(0.797_884_560_802_865_4);
    let u = k * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of(0.797_884_560_802_865_4);
    let u = k * (x + T::of(0.044715) * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::of(3.0 * 0.044715) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

enum Broadcast {
    Same,
    Trailing,
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if !a.is_empty() && &a[1..] == b {
        Ok(Broadcast::Trailing)
    } else {
        Err(Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with(self.id, |t| t.value.shape().to_vec())
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(*self)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.tape.with(self.id, |t| t.value.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.with(self.id, |t| t.requires_grad)
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    fn unary(self, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Var<'t, T> {
        let (value, rg) = self.tape.with(self.id, |t| (t.value.map(f), t.requires_grad));
        self.tape.push(value, rg, op(self.id))
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<Var<'t, T>> {
        self.tape.owns(other)?;
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].tensor, &inner.nodes[other.id].tensor);
            broadcast_kind(name, a.value.shape(), b.value.shape())?;
            let bl = b.value.numel();
            let bd = b.value.data();
            let data = a
                .value
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % bl]))
                .collect();
            (
                Tensor::new(a.value.shape().to_vec(), data)?,
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(value, rg, op(self.id, other.id)))
    }

    /// Elementwise sum; `other` may also be a trailing slice of `self`'s shape
    /// (broadcast over the leading dimension).
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.owns(other)?;
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].tensor, &inner.nodes[other.id].tensor);
            let (sa, sb) = (a.value.shape(), b.value.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![T::zero(); m * n];
            mm(a.value.data(), b.value.data(), &mut out, m, k, n);
            (
                Tensor::new(vec![m, n], out)?,
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(value, rg, Op::MatMul(self.id, other.id)))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        self.unary(|x| x * s, |a| Op::Scale(a, s))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn shift(self, s: T) -> Var<'t, T> {
        self.unary(|x| x + s, Op::Shift)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(|x| if x > T::zero() { x } else { T::zero() }, Op::Relu)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(gelu, Op::Gelu)
    }

    /// Elementwise sign with `sign(0) = 0`. Piecewise constant, so the result carries
    /// no gradient.
    pub fn sign(self) -> Var<'t, T> {
        let value = self.tape.with(self.id, |t| t.value.map(sign));
        self.tape.constant(value)
    }

    /// Heaviside step with `H(0) = 0`; carries no gradient.
    pub fn heaviside(self) -> Var<'t, T> {
        let value = self
            .tape
            .with(self.id, |t| t.value.map(|x| if x > T::zero() { T::one() } else { T::zero() }));
        self.tape.constant(value)
    }

    pub fn abs(self) -> Var<'t, T> {
        self.unary(|x| x.abs(), Op::Abs)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), Op::Exp)
    }

    pub fn log(self) -> Var<'t, T> {
        self.unary(|x| x.ln(), Op::Log)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(sigmoid, Op::Sigmoid)
    }

    fn row_op(self, f: impl Fn(&[T], &mut [T]), op: impl FnOnce(usize) -> Op<T>) -> Var<'t, T> {
        let (value, rg) = self.tape.with(self.id, |t| {
            let mut out = t.value.clone();
            let c = t.value.cols();
            for (src, dst) in t.value.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
                f(src, dst);
            }
            (out, t.requires_grad)
        });
        self.tape.push(value, rg, op(self.id))
    }

    /// Softmax over the last dimension.
    pub fn softmax(self) -> Var<'t, T> {
        self.row_op(
            |x, y| {
                let m = x.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for (yi, &xi) in y.iter_mut().zip(x) {
                    *yi = (xi - m).exp();
                    s += *yi;
                }
                for yi in y.iter_mut() {
                    *yi /= s;
                }
            },
            Op::Softmax,
        )
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(self) -> Var<'t, T> {
        self.row_op(
            |x, y| {
                let m = x.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + x.iter().map(|&xi| (xi - m).exp()).sum::<T>().ln();
                for (yi, &xi) in y.iter_mut().zip(x) {
                    *yi = xi - lse;
                }
            },
            Op::LogSoftmax,
        )
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(self, eps: T) -> Var<'t, T> {
        let (value, rstd, rg) = self.tape.with(self.id, |t| {
            let c = t.value.cols();
            let cn = T::of_usize(c);
            let mut out = t.value.clone();
            let mut rstd = Vec::with_capacity(t.value.rows());
            for (x, y) in t.value.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
                let mean = x.iter().copied().sum::<T>() / cn;
                let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
                let r = T::one() / (var + eps).sqrt();
                for (yi, &xi) in y.iter_mut().zip(x) {
                    *yi = (xi - mean) * r;
                }
                rstd.push(r);
            }
            (out, rstd, t.requires_grad)
        });
        self.tape.push(value, rg, Op::LayerNorm { input: self.id, rstd })
    }

    pub fn sum(self) -> Var<'t, T> {
        let (value, rg) = self.tape.with(self.id, |t| {
            (Tensor::scalar(t.value.data().iter().copied().sum()), t.requires_grad)
        });
        self.tape.push(value, rg, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let (value, rg) = self.tape.with(self.id, |t| {
            let n = T::of_usize(t.value.numel());
            (
                Tensor::scalar(t.value.data().iter().copied().sum::<T>() / n),
                t.requires_grad,
            )
        });
        self.tape.push(value, rg, Op::Mean(self.id))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let (value, rg) = self.tape.with(self.id, |t| Ok::<_, Error>((t.value.transpose()?, t.requires_grad)))?;
        Ok(self.tape.push(value, rg, Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let (value, rg) = self
            .tape
            .with(self.id, |t| Ok::<_, Error>((t.value.clone().reshape(shape)?, t.requires_grad)))?;
        Ok(self.tape.push(value, rg, Op::Reshape(self.id)))
    }

    /// Selects rows of a matrix (embedding lookup).
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t, T>> {
        let (value, rg) = self.tape.with(self.id, |t| {
            let s = t.value.shape();
            if s.len() != 2 || index.is_empty() || index.iter().any(|&r| r >= s[0]) {
                return Err(Error::InvalidShape(s.to_vec(), format!("gather_rows index {index:?}")));
            }
            let mut out = Vec::with_capacity(index.len() * s[1]);
            for &r in index {
                out.extend_from_slice(t.value.row(r));
            }
            Ok((Tensor::new(vec![index.len(), s[1]], out)?, t.requires_grad))
        })?;
        Ok(self.tape.push(
            value,
            rg,
            Op::GatherRows {
                input: self.id,
                index: index.to_vec(),
            },
        ))
    }

    /// Picks individual `(row, col)` entries of a matrix into a vector.
    pub fn gather_elements(self, index: &[(usize, usize)]) -> Result<Var<'t, T>> {
        let (value, rg) = self.tape.with(self.id, |t| {
            let s = t.value.shape();
            if s.len() != 2 || index.is_empty() || index.iter().any(|&(r, c)| r >= s[0] || c >= s[1]) {
                return Err(Error::InvalidShape(s.to_vec(), "gather_elements index out of range".into()));
            }
            let data = index.iter().map(|&(r, c)| t.value.get(r, c)).collect();
            Ok((Tensor::new(vec![index.len()], data)?, t.requires_grad))
        })?;
        Ok(self.tape.push(
            value,
            rg,
            Op::GatherElements {
                input: self.id,
                index: index.to_vec(),
            },
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (value, rg) = self.tape.with(self.id, |t| {
            let s = t.value.shape();
            if s.len() != 2 || len == 0 || start + len > s[1] {
                return Err(Error::InvalidShape(s.to_vec(), format!("slice_cols {start}+{len}")));
            }
            let mut out = Vec::with_capacity(s[0] * len);
            for r in 0..s[0] {
                out.extend_from_slice(&t.value.row(r)[start..start + len]);
            }
            Ok((Tensor::new(vec![s[0], len], out)?, t.requires_grad))
        })?;
        Ok(self.tape.push(value, rg, Op::SliceCols { input: self.id, start }))
    }
}
