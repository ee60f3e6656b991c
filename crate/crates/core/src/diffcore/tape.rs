//! Reverse-mode gradient tape.
//!
//! Every operation appends one node; node ids are therefore a topological
//! order and `backward` walks them once, from the loss down to the leaves.

use std::cell::{Ref, RefCell};

use super::gemm::{gemm_acc, View};
use super::tensor::{axis_extents, broadcast_index_map, broadcast_shape};
use super::{DiffError, Result, Tensor};

/// Epsilon under the square root of every standard deviation.
pub const STD_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Bmm(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Broadcast(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        src: usize,
        axis: usize,
        index: Vec<usize>,
    },
    Softmax(usize),
    LogSoftmax(usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    Std(usize),
    SumLast(usize),
    MeanLast(usize),
    StdLast(usize),
}

#[derive(Default)]
struct Inner {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    tracked: Vec<bool>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// Single-threaded record of a computation.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.values.len();
        inner.values.push(value);
        inner.ops.push(op);
        inner.tracked.push(tracked);
        inner.leaf_grads.push(None);
        Var { tape: self, id }
    }

    /// Trainable input; receives a gradient on `backward`.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaves(&self, values: &[&Tensor]) -> Vec<Var<'_>> {
        values.iter().map(|t| self.leaf((*t).clone())).collect()
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Const, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.inner.borrow(), |i| &i.values[id])
    }

    fn is_tracked(&self, id: usize) -> bool {
        self.inner.borrow().tracked[id]
    }

    /// Accumulated gradient of a leaf (zeros if it never received one).
    pub fn grad(&self, var: Var<'_>) -> Tensor {
        let inner = self.inner.borrow();
        let shape = inner.values[var.id].shape().to_vec();
        match &inner.leaf_grads[var.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&self) {
        for g in self.inner.borrow_mut().leaf_grads.iter_mut() {
            *g = None;
        }
    }

    /// Propagates d(loss)/d(node) to every tracked leaf, adding to any
    /// gradient already accumulated there.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let inner = self.inner.borrow();
        let loss_value = &inner.values[loss.id];
        if loss_value.len() != 1 {
            return Err(DiffError::NotScalar(loss_value.shape().to_vec()));
        }
        let n = loss.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf_updates: Vec<(usize, Vec<f64>)> = Vec::new();

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !inner.tracked[id] {
                continue;
            }
            let out = &inner.values[id];
            let val = |k: usize| &inner.values[k];
            let mut send = |k: usize, gk: Vec<f64>| {
                if !inner.tracked[k] {
                    return;
                }
                match &mut grads[k] {
                    Some(acc) => acc.iter_mut().zip(gk).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gk),
                }
            };
            match &inner.ops[id] {
                Op::Leaf => leaf_updates.push((id, g)),
                Op::Const => {}
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|v| -v).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    send(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                    send(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    send(*a, g.iter().zip(vb).map(|(g, y)| g / y).collect());
                    send(
                        *b,
                        g.iter()
                            .zip(va.iter().zip(vb))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect(),
                    );
                }
                Op::Neg(a) => send(*a, g.iter().map(|v| -v).collect()),
                Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
                Op::AddScalar(a) => send(*a, g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let k = vb.shape()[0];
                    let ncol = vb.shape()[1];
                    let m = va.len() / k;
                    if inner.tracked[*a] {
                        // dA = dC · Bᵀ
                        let mut ga = vec![0.0; m * k];
                        gemm_acc(m, ncol, k, View::rows(&g, ncol), View::transposed(vb.data(), ncol), &mut ga);
                        send(*a, ga);
                    }
                    if inner.tracked[*b] {
                        // dB = Aᵀ · dC
                        let mut gb = vec![0.0; k * ncol];
                        gemm_acc(k, m, ncol, View::transposed(va.data(), k), View::rows(&g, ncol), &mut gb);
                        send(*b, gb);
                    }
                }
                Op::Bmm(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                    let ncol = vb.shape()[2];
                    let (sa, sb, sc) = (m * k, k * ncol, m * ncol);
                    if inner.tracked[*a] {
                        let mut ga = vec![0.0; bs * sa];
                        for s in 0..bs {
                            gemm_acc(
                                m,
                                ncol,
                                k,
                                View::rows(&g[s * sc..(s + 1) * sc], ncol),
                                View::transposed(&vb.data()[s * sb..(s + 1) * sb], ncol),
                                &mut ga[s * sa..(s + 1) * sa],
                            );
                        }
                        send(*a, ga);
                    }
                    if inner.tracked[*b] {
                        let mut gb = vec![0.0; bs * sb];
                        for s in 0..bs {
                            gemm_acc(
                                k,
                                m,
                                ncol,
                                View::transposed(&va.data()[s * sa..(s + 1) * sa], k),
                                View::rows(&g[s * sc..(s + 1) * sc], ncol),
                                &mut gb[s * sb..(s + 1) * sb],
                            );
                        }
                        send(*b, gb);
                    }
                }
                Op::Transpose(a) => {
                    let shape = out.shape();
                    let r = shape.len();
                    let (rows, cols) = (shape[r - 2], shape[r - 1]);
                    send(*a, transpose_last(&g, rows, cols));
                }
                Op::Reshape(a) => send(*a, g),
                Op::Broadcast(a, map) => {
                    let mut ga = vec![0.0; val(*a).len()];
                    for (o, &s) in map.iter().enumerate() {
                        ga[s] += g[o];
                    }
                    send(*a, ga);
                }
                Op::Concat(parts, axis) => {
                    let (outer, _, inner_n) = axis_extents(out.shape(), *axis);
                    let total = out.shape()[*axis] * inner_n;
                    let mut offset = 0;
                    for &p in parts {
                        let width = val(p).shape()[*axis] * inner_n;
                        let mut gp = Vec::with_capacity(outer * width);
                        for o in 0..outer {
                            let base = o * total + offset;
                            gp.extend_from_slice(&g[base..base + width]);
                        }
                        offset += width;
                        send(p, gp);
                    }
                }
                Op::Slice { src, axis, start } => {
                    let src_shape = val(*src).shape();
                    let (outer, len, inner_n) = axis_extents(src_shape, *axis);
                    let width = out.shape()[*axis] * inner_n;
                    let mut gs = vec![0.0; outer * len * inner_n];
                    for o in 0..outer {
                        let base = o * len * inner_n + start * inner_n;
                        gs[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                    }
                    send(*src, gs);
                }
                Op::IndexSelect { src, axis, index } => {
                    let src_shape = val(*src).shape();
                    let (outer, len, inner_n) = axis_extents(src_shape, *axis);
                    let mut gs = vec![0.0; outer * len * inner_n];
                    let k = index.len();
                    for o in 0..outer {
                        for (pos, &ix) in index.iter().enumerate() {
                            let from = (o * k + pos) * inner_n;
                            let to = (o * len + ix) * inner_n;
                            for q in 0..inner_n {
                                gs[to + q] += g[from + q];
                            }
                        }
                    }
                    send(*src, gs);
                }
                Op::Softmax(a) => {
                    let n_last = *out.shape().last().unwrap_or(&1);
                    let p = out.data();
                    let mut ga = vec![0.0; p.len()];
                    for (row, (pr, gr)) in p.chunks(n_last).zip(g.chunks(n_last)).enumerate() {
                        let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                        for q in 0..n_last {
                            ga[row * n_last + q] = pr[q] * (gr[q] - dot);
                        }
                    }
                    send(*a, ga);
                }
                Op::LogSoftmax(a) => {
                    let n_last = *out.shape().last().unwrap_or(&1);
                    let lp = out.data();
                    let mut ga = vec![0.0; lp.len()];
                    for (row, (lr, gr)) in lp.chunks(n_last).zip(g.chunks(n_last)).enumerate() {
                        let gsum: f64 = gr.iter().sum();
                        for q in 0..n_last {
                            ga[row * n_last + q] = gr[q] - lr[q].exp() * gsum;
                        }
                    }
                    send(*a, ga);
                }
                Op::Relu(a) => {
                    let x = val(*a).data();
                    send(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                }
                Op::Tanh(a) => send(
                    *a,
                    g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect(),
                ),
                Op::Exp(a) => send(*a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
                Op::Log(a) => send(*a, g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect()),
                Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
                Op::Mean(a) => {
                    let n = val(*a).len();
                    send(*a, vec![g[0] / n as f64; n]);
                }
                Op::Std(a) => {
                    let x = val(*a).data();
                    let n = x.len() as f64;
                    let mean = x.iter().sum::<f64>() / n;
                    let s = out.data()[0];
                    send(*a, x.iter().map(|v| g[0] * (v - mean) / (n * s)).collect());
                }
                Op::SumLast(a) => {
                    let n_last = *val(*a).shape().last().unwrap_or(&1);
                    send(*a, g.iter().flat_map(|v| std::iter::repeat_n(*v, n_last)).collect());
                }
                Op::MeanLast(a) => {
                    let n_last = *val(*a).shape().last().unwrap_or(&1);
                    let scale = 1.0 / n_last as f64;
                    send(
                        *a,
                        g.iter()
                            .flat_map(|v| std::iter::repeat_n(*v * scale, n_last))
                            .collect(),
                    );
                }
                Op::StdLast(a) => {
                    let x = val(*a);
                    let n_last = *x.shape().last().unwrap_or(&1);
                    let nf = n_last as f64;
                    let mut ga = vec![0.0; x.len()];
                    for (row, xr) in x.data().chunks(n_last).enumerate() {
                        let mean = xr.iter().sum::<f64>() / nf;
                        let s = out.data()[row];
                        for q in 0..n_last {
                            ga[row * n_last + q] = g[row] * (xr[q] - mean) / (nf * s);
                        }
                    }
                    send(*a, ga);
                }
            }
        }
        drop(inner);

        let mut inner = self.inner.borrow_mut();
        for (id, g) in leaf_updates {
            match &mut inner.leaf_grads[id] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn transpose_last(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let block = rows * cols;
    let mut out = vec![0.0; data.len()];
    for (b, chunk) in data.chunks(block).enumerate() {
        for r in 0..rows {
            for c in 0..cols {
                out[b * block + c * rows + r] = chunk[r * cols + c];
            }
        }
    }
    out
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> DiffError {
    DiffError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn tracked(&self) -> bool {
        self.tape.is_tracked(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.tracked())
    }

    fn map(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        drop(v);
        self.unary(t, op)
    }

    /// Broadcasts to `shape` following numpy rules.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let src = self.shape();
        if src == shape {
            return Ok(*self);
        }
        let map = broadcast_index_map(&src, shape).ok_or_else(|| shape_err("broadcast", &src, shape))?;
        let v = self.value();
        let data = map.iter().map(|&s| v.data()[s]).collect();
        drop(v);
        Ok(self.unary(Tensor::new(shape.to_vec(), data)?, Op::Broadcast(self.id, map)))
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| shape_err(name, &sa, &sb))?;
        let a = self.broadcast_to(&out_shape)?;
        let b = other.broadcast_to(&out_shape)?;
        let (va, vb) = (a.value(), b.value());
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        drop((va, vb));
        let tracked = a.tracked() || b.tracked();
        Ok(self
            .tape
            .push(Tensor::new(out_shape, data)?, op(a.id, b.id), tracked))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        if other.value().data().contains(&0.0) {
            return Err(DiffError::Domain("div: zero divisor".into()));
        }
        self.binary(other, "div", |x, y| x / y, Op::Div)
    }

    pub fn neg(&self) -> Var<'t> {
        self.map(|x| -x, Op::Neg(self.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.map(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.map(|x| x + c, Op::AddScalar(self.id))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// `[.., k] × [k, n] -> [.., n]`; leading dimensions are flattened.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = sa.iter().product::<usize>() / k.max(1);
        let (va, vb) = (self.value(), other.value());
        let mut data = vec![0.0; m * n];
        gemm_acc(m, k, n, View::rows(va.data(), k), View::rows(vb.data(), n), &mut data);
        drop((va, vb));
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let tracked = self.tracked() || other.tracked();
        Ok(self
            .tape
            .push(Tensor::new(out_shape, data)?, Op::MatMul(self.id, other.id), tracked))
    }

    /// Batched `[b, m, k] × [b, k, n] -> [b, m, n]`.
    pub fn bmm(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (va, vb) = (self.value(), other.value());
        let mut data = vec![0.0; bs * m * n];
        for (s, out) in data.chunks_mut(m * n).enumerate() {
            let a = &va.data()[s * m * k..(s + 1) * m * k];
            let b = &vb.data()[s * k * n..(s + 1) * k * n];
            gemm_acc(m, k, n, View::rows(a, k), View::rows(b, n), out);
        }
        drop((va, vb));
        let tracked = self.tracked() || other.tracked();
        Ok(self
            .tape
            .push(Tensor::new(vec![bs, m, n], data)?, Op::Bmm(self.id, other.id), tracked))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        let r = shape.len();
        if r < 2 {
            return Err(DiffError::Shape(format!("transpose needs rank >= 2, got {shape:?}")));
        }
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let data = transpose_last(self.value().data(), rows, cols);
        let mut out_shape = shape.clone();
        out_shape.swap(r - 2, r - 1);
        Ok(self.unary(Tensor::new(out_shape, data)?, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let t = self.value().clone().reshaped(shape.to_vec())?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::Shape("concat of nothing".into()))?;
        let tape = first.tape;
        let base = first.shape();
        if axis >= base.len() {
            return Err(DiffError::Shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(k, (x, y))| k == axis || x == y);
            if !ok {
                return Err(shape_err("concat", &base, &s));
            }
            total += s[axis];
        }
        let (outer, _, inner_n) = axis_extents(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner_n);
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        for o in 0..outer {
            for v in &values {
                let w = v.shape()[axis] * inner_n;
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        drop(values);
        let mut shape = base;
        shape[axis] = total;
        let tracked = parts.iter().any(|p| p.tracked());
        Ok(tape.push(
            Tensor::new(shape, data)?,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            tracked,
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(DiffError::Shape(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner_n) = axis_extents(&shape, axis);
        let width = (end - start) * inner_n;
        let v = self.value();
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * len * inner_n + start * inner_n;
            data.extend_from_slice(&v.data()[base..base + width]);
        }
        drop(v);
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        Ok(self.unary(
            Tensor::new(out_shape, data)?,
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
        ))
    }

    /// Gathers entries `index` along `axis` (repeats allowed).
    pub fn index_select(&self, axis: usize, index: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || index.iter().any(|&i| i >= shape[axis]) {
            return Err(DiffError::Shape(format!(
                "index_select on axis {axis} of {shape:?} with {index:?}"
            )));
        }
        let (outer, len, inner_n) = axis_extents(&shape, axis);
        let v = self.value();
        let mut data = Vec::with_capacity(outer * index.len() * inner_n);
        for o in 0..outer {
            for &ix in index {
                let base = (o * len + ix) * inner_n;
                data.extend_from_slice(&v.data()[base..base + inner_n]);
            }
        }
        drop(v);
        let mut out_shape = shape;
        out_shape[axis] = index.len();
        Ok(self.unary(
            Tensor::new(out_shape, data)?,
            Op::IndexSelect {
                src: self.id,
                axis,
                index: index.to_vec(),
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_row(&self) -> Var<'t> {
        let v = self.value();
        let n_last = *v.shape().last().unwrap_or(&1);
        let mut data = Vec::with_capacity(v.len());
        for row in v.data().chunks(n_last) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.into_iter().map(|e| e / z));
        }
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        drop(v);
        self.unary(t, Op::Softmax(self.id))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_row(&self) -> Var<'t> {
        let v = self.value();
        let n_last = *v.shape().last().unwrap_or(&1);
        let mut data = Vec::with_capacity(v.len());
        for row in v.data().chunks(n_last) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        drop(v);
        self.unary(t, Op::LogSoftmax(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.map(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.map(f64::tanh, Op::Tanh(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.map(f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&v| v <= 0.0) {
            return Err(DiffError::Domain("log of a non-positive value".into()));
        }
        Ok(self.map(f64::ln, Op::Log(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        drop(v);
        self.unary(Tensor::scalar(m), Op::Mean(self.id))
    }

    /// Population standard deviation over all entries, `sqrt(var + 1e-12)`.
    pub fn std(&self) -> Var<'t> {
        let s = pop_std(self.value().data());
        self.unary(Tensor::scalar(s), Op::Std(self.id))
    }

    fn reduce_last(&self, f: impl Fn(&[f64]) -> f64, op: Op) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if shape.is_empty() {
            return Err(DiffError::Shape("reduction over the last axis of a scalar".into()));
        }
        let n_last = shape[shape.len() - 1];
        let data = v.data().chunks(n_last).map(f).collect();
        drop(v);
        Ok(self.unary(Tensor::new(shape[..shape.len() - 1].to_vec(), data)?, op))
    }

    pub fn sum_last(&self) -> Result<Var<'t>> {
        self.reduce_last(|r| r.iter().sum(), Op::SumLast(self.id))
    }

    pub fn mean_last(&self) -> Result<Var<'t>> {
        self.reduce_last(|r| r.iter().sum::<f64>() / r.len() as f64, Op::MeanLast(self.id))
    }

    pub fn std_last(&self) -> Result<Var<'t>> {
        self.reduce_last(pop_std, Op::StdLast(self.id))
    }
}

fn pop_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (var + STD_EPS).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let p = x.softmax_row();
        for v in p.value().data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn relu_clips_negatives() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 2.0]);
    }

    #[test]
    fn std_of_constant_has_finite_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0; 4]));
        let s = x.std();
        assert!(s.item() < 1e-5);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_finite());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, -1.0, 2.0]));
        tape.backward(x.sum()).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let loss = x.mul(&x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert_eq!(tape.grad(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(DiffError::NotScalar(_))));
    }

    #[test]
    fn shape_and_domain_errors() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(&b), Err(DiffError::Shape(_))));
        assert!(matches!(a.log(), Err(DiffError::Domain(_))));
        let c = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(a.add(&c), Err(DiffError::Shape(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(
            Tensor::new(vec![2, 3], vec![1.0, -4.0, 30.0, 0.1, 0.2, 0.3]).unwrap(),
        );
        let p = x.softmax_row();
        for row in p.value().data().chunks(3) {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn slice_concat_transpose_forward() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let s = x.slice(1, 1, 3).unwrap();
        assert_eq!(s.value().data(), &[1.0, 2.0, 4.0, 5.0]);
        let c = Var::concat(&[x, s], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 5]);
        assert_eq!(c.value().row(1), &[3.0, 4.0, 5.0, 4.0, 5.0]);
        let t = x.transpose().unwrap();
        assert_eq!(t.value().data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let g = x.index_select(0, &[1, 1]).unwrap();
        assert_eq!(g.value().data(), &[3.0, 4.0, 5.0, 3.0, 4.0, 5.0]);
    }
}
