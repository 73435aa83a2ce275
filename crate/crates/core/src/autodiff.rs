//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is created per forward pass. Operations on [`Var`]s compute
//! their value eagerly and, when the tape is recording and at least one input
//! is tracked, append a node holding the backward rule. An inference tape
//! never records anything, so the same model code serves training, gradient
//! verification and streaming inference.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{kernels, Scalar, Tensor};

type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradSink<T>)>;

struct Node<T> {
    shape: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, usize>,
    consumed: bool,
}

/// Deliberately broken backward rules, used as negative controls for
/// gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Sigmoid backward uses `s` instead of `s(1-s)`.
    SigmoidGrad,
}

pub struct Tape<T: Scalar = f32> {
    recording: bool,
    fault: Option<Fault>,
    inner: RefCell<Inner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            recording: true,
            fault: None,
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                params: HashMap::new(),
                consumed: false,
            }),
        }
    }

    /// A tape that records nothing.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// An untracked value.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var {
            tape: self,
            id: None,
            value,
        }
    }

    /// A tracked leaf (gradient requested).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        if !self.recording {
            return self.constant(value);
        }
        let id = self.push(value.shape().to_vec(), None);
        Var {
            tape: self,
            id: Some(id),
            value,
        }
    }

    /// Lifts a stored parameter. Repeated lifts of the same parameter share
    /// one leaf, so gradients from every use accumulate there.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let value = store.get(id).clone();
        if !self.recording {
            return self.constant(value);
        }
        if let Some(&node) = self.inner.borrow().params.get(&id) {
            return Var {
                tape: self,
                id: Some(node),
                value,
            };
        }
        let node = self.push(value.shape().to_vec(), None);
        self.inner.borrow_mut().params.insert(id, node);
        Var {
            tape: self,
            id: Some(node),
            value,
        }
    }

    fn push(&self, shape: Vec<usize>, backward: Option<BackwardFn<T>>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { shape, backward });
        inner.nodes.len() - 1
    }

    fn record<'t>(
        &'t self,
        value: Tensor<T>,
        tracked: bool,
        backward: impl Fn(&[T], &mut GradSink<T>) + 'static,
    ) -> Var<'t, T> {
        let id = (self.recording && tracked)
            .then(|| self.push(value.shape().to_vec(), Some(Box::new(backward))));
        Var {
            tape: self,
            id,
            value,
        }
    }

    /// Propagates d(loss)/d(node) to every recorded node. Consumes the tape:
    /// a second call fails with [`Error::EmptyTape`].
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if loss.value.len() != 1 {
            return Err(Error::NotScalarLoss(loss.value.shape().to_vec()));
        }
        let mut inner = self.inner.borrow_mut();
        let root = match loss.id {
            Some(id) if !inner.consumed && id < inner.nodes.len() => id,
            _ => return Err(Error::EmptyTape),
        };
        inner.consumed = true;
        let nodes = std::mem::take(&mut inner.nodes);
        let params = std::mem::take(&mut inner.params);
        drop(inner);

        let mut sink = GradSink {
            grads: vec![None; nodes.len()],
            lens: nodes.iter().map(|n| n.shape.iter().product()).collect(),
        };
        sink.grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            let Some(bw) = &nodes[i].backward else {
                continue;
            };
            let Some(g) = sink.grads[i].take() else {
                continue;
            };
            bw(&g, &mut sink);
            sink.grads[i] = Some(g);
        }
        Ok(Gradients {
            grads: sink.grads,
            shapes: nodes.into_iter().map(|n| n.shape).collect(),
            params,
        })
    }
}

/// Gradient accumulator handed to backward rules.
pub struct GradSink<T> {
    grads: Vec<Option<Vec<T>>>,
    lens: Vec<usize>,
}

impl<T: Scalar> GradSink<T> {
    /// Mutable gradient buffer of a tracked input, zero-initialized on first
    /// use. `None` for untracked inputs.
    pub fn slot(&mut self, id: Option<usize>) -> Option<&mut [T]> {
        let id = id?;
        let len = self.lens[id];
        Some(self.grads[id].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a tracked variable (zeros if it did not
    /// influence the loss, `None` if it was never tracked).
    pub fn wrt(&self, v: &Var<'_, T>) -> Option<Tensor<T>> {
        v.id.map(|id| self.node(id))
    }

    /// Gradient with respect to a parameter lifted with [`Tape::param`].
    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        self.params.get(&id).map(|&n| self.node(n))
    }

    fn node(&self, id: usize) -> Tensor<T> {
        let shape = self.shapes[id].clone();
        match &self.grads[id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// A value on a tape.
#[derive(Clone)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: Option<usize>,
    value: Tensor<T>,
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    fn unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static, // (x, y) -> dy/dx
    ) -> Var<'t, T> {
        let x = self.value.clone();
        let y = x.map(f);
        let yc = y.clone();
        let pid = self.id;
        self.tape.record(y, pid.is_some(), move |gy, sink| {
            if let Some(gx) = sink.slot(pid) {
                for i in 0..gy.len() {
                    gx[i] = gx[i] + gy[i] * df(x.data()[i], yc.data()[i]);
                }
            }
        })
    }

    fn zip(
        &self,
        rhs: &Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T) -> T + 'static,
        db: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        let (a, b) = (self.value.clone(), rhs.value.clone());
        let shape = if a.shape() == b.shape() || b.len() == 1 {
            a.shape().to_vec()
        } else if a.len() == 1 {
            b.shape().to_vec()
        } else {
            return Err(Error::shape(op, a.shape(), b.shape()));
        };
        let n: usize = shape.iter().product();
        let ai = move |t: &Tensor<T>, i: usize| if t.len() == 1 { 0 } else { i };
        let data = (0..n)
            .map(|i| f(a.data()[ai(&a, i)], b.data()[ai(&b, i)]))
            .collect();
        let y = Tensor::new(shape, data)?;
        let (pa, pb) = (self.id, rhs.id);
        Ok(self
            .tape
            .record(y, pa.is_some() || pb.is_some(), move |gy, sink| {
                if let Some(g) = sink.slot(pa) {
                    for i in 0..gy.len() {
                        let (x, z) = (a.data()[ai(&a, i)], b.data()[ai(&b, i)]);
                        g[ai(&a, i)] = g[ai(&a, i)] + gy[i] * da(x, z);
                    }
                }
                if let Some(g) = sink.slot(pb) {
                    for i in 0..gy.len() {
                        let (x, z) = (a.data()[ai(&a, i)], b.data()[ai(&b, i)]);
                        g[ai(&b, i)] = g[ai(&b, i)] + gy[i] * db(x, z);
                    }
                }
            }))
    }

    /// Elementwise sum; equal shapes, or one side a single element.
    pub fn add(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip(rhs, "add", |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip(rhs, "sub", |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip(rhs, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let faulty = self.tape.fault == Some(Fault::SigmoidGrad);
        self.unary(
            |x| T::one() / (T::one() + (-x).exp()),
            move |_, s| if faulty { s } else { s * (T::one() - s) },
        )
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn square(&self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Var<'t, T> {
        let half = T::from_f64(0.5);
        self.unary(|x| x.sqrt(), move |_, y| half / y)
    }

    pub fn powf(&self, p: T) -> Var<'t, T> {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - T::one()))
    }

    /// Parametric ReLU with a single shared slope `alpha` (one element).
    pub fn prelu(&self, alpha: &Var<'t, T>) -> Result<Var<'t, T>> {
        if alpha.value.len() != 1 {
            return Err(Error::shape("prelu", self.shape(), alpha.shape()));
        }
        let x = self.value.clone();
        let a = alpha.value.item();
        let y = x.map(|v| if v > T::zero() { v } else { a * v });
        let (px, pa) = (self.id, alpha.id);
        Ok(self
            .tape
            .record(y, px.is_some() || pa.is_some(), move |gy, sink| {
                if let Some(g) = sink.slot(px) {
                    for (i, &v) in x.data().iter().enumerate() {
                        g[i] = g[i] + if v > T::zero() { gy[i] } else { a * gy[i] };
                    }
                }
                if let Some(g) = sink.slot(pa) {
                    let mut s = T::zero();
                    for (i, &v) in x.data().iter().enumerate() {
                        if v <= T::zero() {
                            s = s + v * gy[i];
                        }
                    }
                    g[0] = g[0] + s;
                }
            }))
    }

    /// `[m×k] · [k×n]`
    pub fn matmul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (m, k) = self.value.dims2("matmul")?;
        let (k2, n) = rhs.value.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let (a, b) = (self.value.clone(), rhs.value.clone());
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(a.data(), b.data(), &mut out, m, k, n);
        let y = Tensor::new([m, n], out)?;
        let (pa, pb) = (self.id, rhs.id);
        Ok(self
            .tape
            .record(y, pa.is_some() || pb.is_some(), move |gy, sink| {
                if let Some(ga) = sink.slot(pa) {
                    let mut tmp = vec![T::zero(); m * k];
                    kernels::matmul_nt(gy, b.data(), &mut tmp, m, n, k);
                    add_into(ga, &tmp);
                }
                if let Some(gb) = sink.slot(pb) {
                    kernels::matmul_tn_acc(a.data(), gy, gb, k, m, n);
                }
            }))
    }

    /// `[m×k] · [n×k]ᵀ`, the fully-connected layout.
    pub fn matmul_nt(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (m, k) = self.value.dims2("matmul_nt")?;
        let (n, k2) = rhs.value.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(), rhs.shape()));
        }
        let (a, b) = (self.value.clone(), rhs.value.clone());
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt(a.data(), b.data(), &mut out, m, k, n);
        let y = Tensor::new([m, n], out)?;
        let (pa, pb) = (self.id, rhs.id);
        Ok(self
            .tape
            .record(y, pa.is_some() || pb.is_some(), move |gy, sink| {
                if let Some(ga) = sink.slot(pa) {
                    let mut tmp = vec![T::zero(); m * k];
                    kernels::matmul(gy, b.data(), &mut tmp, m, n, k);
                    add_into(ga, &tmp);
                }
                if let Some(gb) = sink.slot(pb) {
                    kernels::matmul_tn_acc(gy, a.data(), gb, n, m, k);
                }
            }))
    }

    /// Adds `bias[n]` to every row of `[m×n]`.
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (m, n) = self.value.dims2("add_bias")?;
        if bias.value.len() != n {
            return Err(Error::shape("add_bias", self.shape(), bias.shape()));
        }
        let b = bias.value.clone();
        let mut out = self.value.to_vec();
        for row in out.chunks_mut(n) {
            add_into(row, b.data());
        }
        let y = Tensor::new([m, n], out)?;
        let (px, pb) = (self.id, bias.id);
        Ok(self
            .tape
            .record(y, px.is_some() || pb.is_some(), move |gy, sink| {
                if let Some(g) = sink.slot(px) {
                    add_into(g, gy);
                }
                if let Some(g) = sink.slot(pb) {
                    for row in gy.chunks(n) {
                        add_into(g, row);
                    }
                }
            }))
    }

    /// Layer normalization over the last dimension, statistics in f64.
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let d = *self.shape().last().unwrap_or(&0);
        if d == 0 || gamma.value.len() != d || beta.value.len() != d {
            return Err(Error::shape("layer_norm", self.shape(), gamma.shape()));
        }
        let x = self.value.clone();
        let (gm, bt) = (gamma.value.clone(), beta.value.clone());
        let rows = x.len() / d;
        let mut xhat = vec![0.0f64; x.len()];
        let mut inv_std = vec![0.0f64; rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let xr = &x.data()[r * d..(r + 1) * d];
            let (mean, var) = kernels::moments(xr);
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (xr[j].as_f64() - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = T::from_f64(gm.data()[j].as_f64() * h + bt.data()[j].as_f64());
            }
        }
        let y = Tensor::new(x.shape().to_vec(), out)?;
        let (px, pg, pb) = (self.id, gamma.id, beta.id);
        let tracked = px.is_some() || pg.is_some() || pb.is_some();
        Ok(self.tape.record(y, tracked, move |gy, sink| {
            if let Some(g) = sink.slot(pg) {
                for r in 0..rows {
                    for j in 0..d {
                        g[j] = g[j] + T::from_f64(gy[r * d + j].as_f64() * xhat[r * d + j]);
                    }
                }
            }
            if let Some(g) = sink.slot(pb) {
                for row in gy.chunks(d) {
                    add_into(g, row);
                }
            }
            if let Some(g) = sink.slot(px) {
                let nd = d as f64;
                for r in 0..rows {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let dh = gy[r * d + j].as_f64() * gm.data()[j].as_f64();
                        s1 += dh;
                        s2 += dh * xhat[r * d + j];
                    }
                    for j in 0..d {
                        let dh = gy[r * d + j].as_f64() * gm.data()[j].as_f64();
                        let dx = inv_std[r] * (dh - s1 / nd - xhat[r * d + j] * s2 / nd);
                        g[r * d + j] = g[r * d + j] + T::from_f64(dx);
                    }
                }
            }
        }))
    }

    /// Same data, new shape.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let y = self.value.reshape(shape)?;
        let px = self.id;
        Ok(self.tape.record(y, px.is_some(), move |gy, sink| {
            if let Some(g) = sink.slot(px) {
                add_into(g, gy);
            }
        }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let (m, n) = self.value.dims2("transpose")?;
        let x = self.value.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let y = Tensor::new([n, m], out)?;
        let px = self.id;
        Ok(self.tape.record(y, px.is_some(), move |gy, sink| {
            if let Some(g) = sink.slot(px) {
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] = g[i * n + j] + gy[j * m + i];
                    }
                }
            }
        }))
    }

    /// `[m×p] ++ [m×q] → [m×(p+q)]`
    pub fn concat_cols(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (m, p) = self.value.dims2("concat_cols")?;
        let (m2, q) = rhs.value.dims2("concat_cols")?;
        if m != m2 {
            return Err(Error::shape("concat_cols", self.shape(), rhs.shape()));
        }
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(&self.value.data()[r * p..(r + 1) * p]);
            out.extend_from_slice(&rhs.value.data()[r * q..(r + 1) * q]);
        }
        let y = Tensor::new([m, p + q], out)?;
        let (pa, pb) = (self.id, rhs.id);
        Ok(self
            .tape
            .record(y, pa.is_some() || pb.is_some(), move |gy, sink| {
                if let Some(g) = sink.slot(pa) {
                    for r in 0..m {
                        add_into(&mut g[r * p..(r + 1) * p], &gy[r * (p + q)..r * (p + q) + p]);
                    }
                }
                if let Some(g) = sink.slot(pb) {
                    for r in 0..m {
                        add_into(&mut g[r * q..(r + 1) * q], &gy[r * (p + q) + p..(r + 1) * (p + q)]);
                    }
                }
            }))
    }

    /// Columns `start..start+len` of `[m×n]`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (m, n) = self.value.dims2("slice_cols")?;
        if start + len > n {
            return Err(Error::shape("slice_cols", self.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&self.value.data()[r * n + start..r * n + start + len]);
        }
        let y = Tensor::new([m, len], out)?;
        let px = self.id;
        Ok(self.tape.record(y, px.is_some(), move |gy, sink| {
            if let Some(g) = sink.slot(px) {
                for r in 0..m {
                    add_into(&mut g[r * n + start..r * n + start + len], &gy[r * len..(r + 1) * len]);
                }
            }
        }))
    }

    /// Stacks `[rᵢ×n]` blocks (rank-1 `[n]` counts as one row).
    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(Error::shape("concat_rows", &[], &[]))?;
        let n = *first.shape().last().unwrap_or(&0);
        let mut out = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        for p in parts {
            if p.shape().last() != Some(&n) || p.shape().len() > 2 {
                return Err(Error::shape("concat_rows", first.shape(), p.shape()));
            }
            offsets.push((p.id, out.len(), p.value.len()));
            out.extend_from_slice(p.value.data());
        }
        let rows = out.len() / n.max(1);
        let y = Tensor::new([rows, n], out)?;
        let tracked = parts.iter().any(|p| p.id.is_some());
        Ok(first.tape.record(y, tracked, move |gy, sink| {
            for &(pid, off, len) in &offsets {
                if let Some(g) = sink.slot(pid) {
                    add_into(g, &gy[off..off + len]);
                }
            }
        }))
    }

    /// Rows `start..start+len` of `[m×n]`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (m, n) = self.value.dims2("slice_rows")?;
        if start + len > m {
            return Err(Error::shape("slice_rows", self.shape(), &[start, len]));
        }
        let y = Tensor::new([len, n], self.value.data()[start * n..(start + len) * n].to_vec())?;
        let px = self.id;
        Ok(self.tape.record(y, px.is_some(), move |gy, sink| {
            if let Some(g) = sink.slot(px) {
                add_into(&mut g[start * n..(start + len) * n], gy);
            }
        }))
    }

    /// Selects rows by index (repeats allowed): `[m×n] → [idx.len()×n]`.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t, T>> {
        let (m, n) = self.value.dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", self.shape(), &[bad]));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&self.value.data()[i * n..(i + 1) * n]);
        }
        let y = Tensor::new([idx.len(), n], out)?;
        let idx = idx.to_vec();
        let px = self.id;
        Ok(self.tape.record(y, px.is_some(), move |gy, sink| {
            if let Some(g) = sink.slot(px) {
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut g[i * n..(i + 1) * n], &gy[r * n..(r + 1) * n]);
                }
            }
        }))
    }

    /// Mean of each row: `[m×n] → [m]`.
    pub fn row_means(&self) -> Result<Var<'t, T>> {
        let (m, n) = self.value.dims2("row_means")?;
        let inv = 1.0 / n as f64;
        let out = self
            .value
            .data()
            .chunks(n)
            .map(|r| T::from_f64(r.iter().map(|v| v.as_f64()).sum::<f64>() * inv))
            .collect();
        let y = Tensor::new([m], out)?;
        let px = self.id;
        Ok(self.tape.record(y, px.is_some(), move |gy, sink| {
            if let Some(g) = sink.slot(px) {
                for r in 0..m {
                    let v = gy[r] * T::from_f64(inv);
                    for x in &mut g[r * n..(r + 1) * n] {
                        *x = *x + v;
                    }
                }
            }
        }))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value.data().iter().map(|v| v.as_f64()).sum::<f64>();
        let px = self.id;
        self.tape
            .record(Tensor::scalar(T::from_f64(s)), px.is_some(), move |gy, sink| {
                if let Some(g) = sink.slot(px) {
                    for x in g.iter_mut() {
                        *x = *x + gy[0];
                    }
                }
            })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value.len().max(1) as f64;
        self.sum().scale(T::from_f64(1.0 / n))
    }

    /// Sliding windows over a signal `[T]` or `[C×T]`:
    /// `→ [F × C·window]` with `F = ⌊(T−window)/hop⌋ + 1`.
    pub fn frames(&self, window: usize, hop: usize) -> Result<Var<'t, T>> {
        let (ch, len) = match self.shape() {
            [t] => (1, *t),
            [c, t] => (*c, *t),
            s => return Err(Error::shape("frames", s, &[])),
        };
        if len < window {
            return Err(Error::InputTooShort {
                needed: window,
                got: len,
            });
        }
        let nf = (len - window) / hop + 1;
        let x = self.value.data();
        let w = ch * window;
        let mut out = Vec::with_capacity(nf * w);
        for f in 0..nf {
            for c in 0..ch {
                out.extend_from_slice(&x[c * len + f * hop..c * len + f * hop + window]);
            }
        }
        let y = Tensor::new([nf, w], out)?;
        let px = self.id;
        Ok(self.tape.record(y, px.is_some(), move |gy, sink| {
            if let Some(g) = sink.slot(px) {
                for f in 0..nf {
                    for c in 0..ch {
                        let src = &gy[f * w + c * window..f * w + (c + 1) * window];
                        add_into(&mut g[c * len + f * hop..c * len + f * hop + window], src);
                    }
                }
            }
        }))
    }

    /// Inverse of [`frames`](Self::frames) for one channel: sums `[F×window]`
    /// rows at `hop` spacing into `[(F−1)·hop + window]`.
    pub fn overlap_add(&self, hop: usize) -> Result<Var<'t, T>> {
        let (nf, w) = self.value.dims2("overlap_add")?;
        if nf == 0 {
            return Err(Error::shape("overlap_add", self.shape(), &[]));
        }
        let len = (nf - 1) * hop + w;
        let mut out = vec![T::zero(); len];
        for (f, row) in self.value.data().chunks(w).enumerate() {
            add_into(&mut out[f * hop..f * hop + w], row);
        }
        let y = Tensor::new([len], out)?;
        let px = self.id;
        Ok(self.tape.record(y, px.is_some(), move |gy, sink| {
            if let Some(g) = sink.slot(px) {
                for f in 0..nf {
                    add_into(&mut g[f * w..(f + 1) * w], &gy[f * hop..f * hop + w]);
                }
            }
        }))
    }

    /// 2-D cross-correlation of `[C×H×W]` with `weight[O × C/groups × k × k]`,
    /// zero padding `pad` on every side.
    pub fn conv2d(
        &self,
        weight: &Var<'t, T>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var<'t, T>> {
        let [c, h, w] = self.shape()[..] else {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        };
        let [o, cg, k, k2] = weight.shape()[..] else {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        };
        if k != k2 || groups == 0 || c % groups != 0 || o % groups != 0 || cg * groups != c {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::InputTooShort {
                needed: k,
                got: h.min(w) + 2 * pad,
            });
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let og = o / groups;
        let geo = ConvGeom {
            c,
            h,
            w,
            o,
            cg,
            og,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let (x, wt) = (self.value.clone(), weight.value.clone());
        let mut out = vec![T::zero(); o * ho * wo];
        geo.for_each_tap(|oc, oy, ox, ic, iy, ix, wi| {
            let v = out[(oc * ho + oy) * wo + ox] + x.data()[(ic * h + iy) * w + ix] * wt.data()[wi];
            out[(oc * ho + oy) * wo + ox] = v;
        });
        let y = Tensor::new([o, ho, wo], out)?;
        let (px, pw) = (self.id, weight.id);
        Ok(self
            .tape
            .record(y, px.is_some() || pw.is_some(), move |gy, sink| {
                if let Some(gx) = sink.slot(px) {
                    geo.for_each_tap(|oc, oy, ox, ic, iy, ix, wi| {
                        let i = (ic * h + iy) * w + ix;
                        gx[i] = gx[i] + gy[(oc * ho + oy) * wo + ox] * wt.data()[wi];
                    });
                }
                if let Some(gw) = sink.slot(pw) {
                    geo.for_each_tap(|oc, oy, ox, ic, iy, ix, wi| {
                        gw[wi] = gw[wi] + gy[(oc * ho + oy) * wo + ox] * x.data()[(ic * h + iy) * w + ix];
                    });
                }
            }))
    }

    /// Per-channel `x·scale[c] + shift[c]` on `[C×…]`.
    pub fn channel_affine(&self, scale: &Var<'t, T>, shift: &Var<'t, T>) -> Result<Var<'t, T>> {
        let c = self.shape()[0];
        if scale.value.len() != c || shift.value.len() != c {
            return Err(Error::shape("channel_affine", self.shape(), scale.shape()));
        }
        let plane = self.value.len() / c;
        let x = self.value.clone();
        let (s, b) = (scale.value.clone(), shift.value.clone());
        let out = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * s.data()[i / plane] + b.data()[i / plane])
            .collect();
        let y = Tensor::new(x.shape().to_vec(), out)?;
        let (px, ps, pb) = (self.id, scale.id, shift.id);
        let tracked = px.is_some() || ps.is_some() || pb.is_some();
        Ok(self.tape.record(y, tracked, move |gy, sink| {
            if let Some(g) = sink.slot(px) {
                for i in 0..gy.len() {
                    g[i] = g[i] + gy[i] * s.data()[i / plane];
                }
            }
            if let Some(g) = sink.slot(ps) {
                for i in 0..gy.len() {
                    g[i / plane] = g[i / plane] + gy[i] * x.data()[i];
                }
            }
            if let Some(g) = sink.slot(pb) {
                for i in 0..gy.len() {
                    g[i / plane] = g[i / plane] + gy[i];
                }
            }
        }))
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    cg: usize,
    og: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Visits every (output, input, weight) triple of the convolution.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize)) {
        let _ = self.c;
        for oc in 0..self.o {
            let grp = oc / self.og;
            for icg in 0..self.cg {
                let ic = grp * self.cg + icg;
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let wi = ((oc * self.cg + icg) * self.k + ky) * self.k + kx;
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for ox in 0..self.wo {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(oc, oy, ox, ic, iy as usize, ix as usize, wi);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Minimum number of scalar parameters to probe (all, if fewer exist).
    pub samples: usize,
    pub seed: u64,
    /// Smallest denominator of the relative error: gradients below it are
    /// compared with absolute accuracy `tol · floor`.
    pub floor: f64,
    /// Broken backward rule to inject (negative control).
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            tol: 1e-3,
            samples: 100,
            seed: 0,
            floor: 1e-8,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Compares analytic gradients of `f` against central finite differences
/// `(f(p+ε) − f(p−ε)) / 2ε` on a stratified random subset of parameters.
/// Relative error uses the denominator `max(|analytic|, |numeric|, floor)`.
pub fn grad_check<T, F>(f: F, params: &mut ParamStore<T>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &'t ParamStore<T>) -> Result<Var<'t, T>>,
{
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let tape = match opts.fault {
        Some(fault) => Tape::new().with_fault(fault),
        None => Tape::new(),
    };
    let loss = f(&tape, params)?;
    let base = loss.value().item().as_f64();
    let grads = match tape.backward(&loss) {
        Ok(g) => Some(g),
        // A loss that does not depend on any parameter has zero gradient.
        Err(Error::EmptyTape) => None,
        Err(e) => return Err(e),
    };
    let again = f(&Tape::inference(), params)?.value().item().as_f64();
    if again != base {
        return Err(Error::NonDeterministicFunction {
            first: base,
            second: again,
        });
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<ParamId> = params.ids().filter(|&id| !params.get(id).is_empty()).collect();
    let total: usize = ids.iter().map(|&id| params.get(id).len()).sum();
    let mut picks: Vec<(ParamId, usize)> = Vec::new();
    if total <= opts.samples {
        for &id in &ids {
            picks.extend((0..params.get(id).len()).map(|i| (id, i)));
        }
    } else {
        let quota = opts.samples.div_ceil(ids.len().max(1)).max(2);
        let mut leftovers = Vec::new();
        for &id in &ids {
            let mut idx: Vec<usize> = (0..params.get(id).len()).collect();
            idx.shuffle(&mut rng);
            let take = quota.min(idx.len());
            picks.extend(idx[..take].iter().map(|&i| (id, i)));
            leftovers.extend(idx[take..].iter().map(|&i| (id, i)));
        }
        leftovers.shuffle(&mut rng);
        let short = opts.samples.saturating_sub(picks.len());
        picks.extend(leftovers.into_iter().take(short));
    }

    let eps = T::from_f64(opts.eps);
    let mut samples = Vec::with_capacity(picks.len());
    for (id, i) in picks {
        let analytic = grads
            .as_ref()
            .and_then(|g| g.param(id))
            .map_or(0.0, |g| g.data()[i].as_f64());
        params.nudge(id, i, eps);
        let plus = f(&Tape::inference(), params)?.value().item().as_f64();
        params.nudge(id, i, -(eps + eps));
        let minus = f(&Tape::inference(), params)?.value().item().as_f64();
        params.nudge(id, i, eps);
        let numeric = (plus - minus) / (2.0 * opts.eps);
        let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
        samples.push(GradSample {
            name: params.name(id).to_string(),
            index: i,
            analytic,
            numeric,
            rel_err: (analytic - numeric).abs() / denom,
        });
    }
    let max_rel_err = samples.iter().map(|s| s.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        pass: max_rel_err <= opts.tol,
        max_rel_err,
        samples,
    })
}
