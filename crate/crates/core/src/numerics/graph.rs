//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! only into nodes that transitively depend on a trainable leaf. Leaves can
//! borrow their tensors, so binding a model's parameters costs nothing.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::gemm::gemm;
use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Cols { x: Var, start: usize },
    Rows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Embed { table: Var, ids: Vec<usize> },
    LogSoftmax(Var),
    Pick { x: Var, idx: Vec<usize> },
    Sum(Var),
    OuterSum(Var, Var),
    Distance { pairs: Vec<(Var, Var)>, eps: f64 },
    Custom { x: Var, grad: Option<Tensor>, name: &'static str },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Cols { .. } => "cols",
            Op::Rows { .. } => "rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
            Op::Embed { .. } => "embed",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Pick { .. } => "pick",
            Op::Sum(..) => "sum",
            Op::OuterSum(..) => "outer_sum",
            Op::Distance { .. } => "distance",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Parameter names bound to graph leaves.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// The names under `prefix.`, with the prefix removed.
    pub fn scoped(&self, prefix: &str) -> Bound {
        let head = format!("{prefix}.");
        let vars = self.vars.iter().filter_map(|(k, v)| k.strip_prefix(&head).map(|r| (r.to_string(), *v))).collect();
        Bound { vars }
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter of `bound`, zero where no path exists.
    pub fn collect(&self, set: &ParamSet, bound: &Bound) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, t) in set.iter() {
            let v = bound.var(name)?;
            let g = self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name, g);
        }
        Ok(out)
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Bind every tensor of `set` as a leaf; `trainable` decides whether
    /// gradients flow into them.
    pub fn bind(&mut self, set: &'a ParamSet, trainable: bool) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, t) in set.iter() {
            let v = if trainable { self.param(t) } else { self.constant(t) };
            vars.insert(name.to_string(), v);
        }
        Bound { vars }
    }

    fn shape_err(&self, op: &str, a: Var, b: Var) -> Error {
        Error::Shape(format!("{op}: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(t, Op::MatMul(a, b), &[a, b]))
    }

    fn zip(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(self.shape_err(name, a, b));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push_op(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push_op(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push_op(t, Op::Mul(a, b), &[a, b]))
    }

    /// `x + bias` with `bias` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(self.shape_err("add_row", x, bias));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (a, b) in row.iter_mut().zip(bv.data()) {
                *a += b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push_op(t, Op::AddRow(x, bias), &[x, bias]))
    }

    /// `x·w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x).map(|v| v * k);
        self.push_op(t, Op::Scale(x, k), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push_op(t, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        self.push_op(t, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        self.push_op(t, Op::Exp(x), &[x])
    }

    /// Row-wise layer normalization followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push_op(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// Column block `[start, start+len)` of every row.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c {
            return Err(Error::Shape(format!("cols {start}+{len} exceeds {c}")));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::new(vec![xv.rows(), len], data)?;
        Ok(self.push_op(t, Op::Cols { x, start }, &[x]))
    }

    /// Row block `[start, start+len)`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > xv.rows() {
            return Err(Error::Shape(format!("rows {start}+{len} exceeds {}", xv.rows())));
        }
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        Ok(self.push_op(t, Op::Rows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).rows();
        if xs.iter().any(|&v| self.value(v).rows() != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = xs.iter().map(|&v| self.value(v).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                data.extend_from_slice(self.value(v).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        Ok(self.push_op(t, Op::ConcatCols(xs.to_vec()), xs))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.value(xs[0]).cols();
        if xs.iter().any(|&v| self.value(v).cols() != cols) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let t = self.value(v);
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push_op(t, Op::ConcatRows(xs.to_vec()), xs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(t, Op::Reshape(x), &[x]))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let c = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= tv.rows() {
                return Err(Error::BadToken(id));
            }
            data.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.push_op(t, Op::Embed { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x).log_softmax_rows();
        self.push_op(t, Op::LogSoftmax(x), &[x])
    }

    /// Sum of the entries at flat indices `idx` (repeats count repeatedly).
    pub fn pick_sum(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::Shape(format!("pick index {bad} out of {}", xv.len())));
        }
        let s = idx.iter().map(|&i| xv.data()[i]).sum();
        Ok(self.push_op(Tensor::scalar(s), Op::Pick { x, idx }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Broadcast sum `out[t*U + u] = a[t] + b[u]` over rows of `a` (T×H) and
    /// `b` (U×H), yielding (T·U)×H.
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let h = av.cols();
        if bv.cols() != h {
            return Err(self.shape_err("outer_sum", a, b));
        }
        let (tn, un) = (av.rows(), bv.rows());
        let mut data = Vec::with_capacity(tn * un * h);
        for t in 0..tn {
            let ar = av.row(t);
            for u in 0..un {
                data.extend(ar.iter().zip(bv.row(u)).map(|(x, y)| x + y));
            }
        }
        let t = Tensor::new(vec![tn * un, h], data)?;
        Ok(self.push_op(t, Op::OuterSum(a, b), &[a, b]))
    }

    /// Euclidean distance between the concatenations of the left and right
    /// members of `pairs`. The gradient divides by `max(distance, eps)`.
    pub fn distance(&mut self, pairs: &[(Var, Var)], eps: f64) -> Result<Var> {
        let mut s = 0.0;
        for &(a, b) in pairs {
            let (av, bv) = (self.value(a), self.value(b));
            if av.shape() != bv.shape() {
                return Err(self.shape_err("distance", a, b));
            }
            s += av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        let parents: Vec<Var> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        let op = Op::Distance { pairs: pairs.to_vec(), eps };
        Ok(self.push_op(Tensor::scalar(s.sqrt()), op, &parents))
    }

    /// Scalar node whose value and gradient w.r.t. `x` were computed outside
    /// the tape. `grad` may be `None` when `x` needs no gradient.
    pub fn custom_scalar(&mut self, x: Var, value: f64, grad: Option<Tensor>, name: &'static str) -> Result<Var> {
        if let Some(g) = &grad {
            if g.shape() != self.value(x).shape() {
                return Err(Error::Shape(format!("{name}: gradient shape mismatch")));
            }
        }
        Ok(self.push_op(Tensor::scalar(value), Op::Custom { x, grad, name }, &[x]))
    }

    /// First node (in recording order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.is_finite()).map(|(i, n)| (i, n.op.name()))
    }

    pub fn check_finite(&self, v: Var) -> Result<()> {
        if self.value(v).is_finite() {
            return Ok(());
        }
        let (index, op) = self.first_non_finite().unwrap_or((v.0, self.nodes[v.0].op.name()));
        Err(Error::NonFinite { index, op })
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accum_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("just filled").data_mut());
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    self.accum_with(grads, *a, |da| gemm(m, n, k, g.data(), false, bv.data(), true, da, 1.0));
                }
                if self.requires_grad(*b) {
                    self.accum_with(grads, *b, |db| gemm(k, m, n, av.data(), true, g.data(), false, db, 1.0));
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accum_with(grads, *a, |da| {
                    for ((d, gv), y) in da.iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += gv * y;
                    }
                });
                self.accum_with(grads, *b, |db| {
                    for ((d, gv), x) in db.iter_mut().zip(g.data()).zip(av.data()) {
                        *d += gv * x;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                self.accum(grads, *x, g.clone());
                let c = g.cols();
                self.accum_with(grads, *bias, |db| {
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                });
            }
            Op::Scale(x, k) => self.accum(grads, *x, g.map(|v| v * k)),
            Op::Sigmoid(x) => self.accum_with(grads, *x, |dx| {
                for ((d, gv), y) in dx.iter_mut().zip(g.data()).zip(out.data()) {
                    *d += gv * y * (1.0 - y);
                }
            }),
            Op::Tanh(x) => self.accum_with(grads, *x, |dx| {
                for ((d, gv), y) in dx.iter_mut().zip(g.data()).zip(out.data()) {
                    *d += gv * (1.0 - y * y);
                }
            }),
            Op::Exp(x) => self.accum_with(grads, *x, |dx| {
                for ((d, gv), y) in dx.iter_mut().zip(g.data()).zip(out.data()) {
                    *d += gv * y;
                }
            }),
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = g.cols();
                let gv = self.value(*gain).data();
                self.accum_with(grads, *gain, |dg| {
                    for (grow, hrow) in g.data().chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.accum_with(grads, *bias, |db| {
                    for grow in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(grow) {
                            *d += v;
                        }
                    }
                });
                self.accum_with(grads, *x, |dx| {
                    let n = c as f64;
                    for (r, (grow, hrow)) in g.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hrow[j];
                        }
                        let inv = inv_std[r];
                        let drow = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            drow[j] += inv / n * (n * dh - s1 - hrow[j] * s2);
                        }
                    }
                });
            }
            Op::Cols { x, start } => {
                let c = self.value(*x).cols();
                let len = g.cols();
                self.accum_with(grads, *x, |dx| {
                    for (r, grow) in g.data().chunks(len).enumerate() {
                        for (d, v) in dx[r * c + start..r * c + start + len].iter_mut().zip(grow) {
                            *d += v;
                        }
                    }
                });
            }
            Op::Rows { x, start } => {
                let c = g.cols();
                self.accum_with(grads, *x, |dx| {
                    for (d, v) in dx[start * c..start * c + g.len()].iter_mut().zip(g.data()) {
                        *d += v;
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let total = g.cols();
                let mut off = 0;
                for &v in xs {
                    let w = self.value(v).cols();
                    self.accum_with(grads, v, |dx| {
                        for (r, grow) in g.data().chunks(total).enumerate() {
                            for (d, gv) in dx[r * w..(r + 1) * w].iter_mut().zip(&grow[off..off + w]) {
                                *d += gv;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    self.accum_with(grads, v, |dx| {
                        for (d, gv) in dx.iter_mut().zip(&g.data()[off..off + n]) {
                            *d += gv;
                        }
                    });
                    off += n;
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accum(grads, *x, g.clone().reshape(shape).expect("same element count"));
            }
            Op::Embed { table, ids } => {
                let c = g.cols();
                self.accum_with(grads, *table, |dt| {
                    for (grow, &id) in g.data().chunks(c).zip(ids) {
                        for (d, v) in dt[id * c..(id + 1) * c].iter_mut().zip(grow) {
                            *d += v;
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = g.cols();
                self.accum_with(grads, *x, |dx| {
                    for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.data().chunks(c)).zip(out.data().chunks(c)) {
                        let gs: f64 = grow.iter().sum();
                        for j in 0..c {
                            drow[j] += grow[j] - yrow[j].exp() * gs;
                        }
                    }
                });
            }
            Op::Pick { x, idx } => {
                let gv = g.item();
                self.accum_with(grads, *x, |dx| {
                    for &i in idx {
                        dx[i] += gv;
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accum_with(grads, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::OuterSum(a, b) => {
                let h = g.cols();
                let tn = self.value(*a).rows();
                let un = self.value(*b).rows();
                self.accum_with(grads, *a, |da| {
                    for t in 0..tn {
                        for u in 0..un {
                            let grow = &g.data()[(t * un + u) * h..(t * un + u + 1) * h];
                            for (d, v) in da[t * h..(t + 1) * h].iter_mut().zip(grow) {
                                *d += v;
                            }
                        }
                    }
                });
                self.accum_with(grads, *b, |db| {
                    for t in 0..tn {
                        for u in 0..un {
                            let grow = &g.data()[(t * un + u) * h..(t * un + u + 1) * h];
                            for (d, v) in db[u * h..(u + 1) * h].iter_mut().zip(grow) {
                                *d += v;
                            }
                        }
                    }
                });
            }
            Op::Distance { pairs, eps } => {
                let k = g.item() / out.item().max(*eps);
                for &(a, b) in pairs {
                    let (av, bv) = (self.value(a), self.value(b));
                    self.accum_with(grads, a, |da| {
                        for ((d, x), y) in da.iter_mut().zip(av.data()).zip(bv.data()) {
                            *d += k * (x - y);
                        }
                    });
                    self.accum_with(grads, b, |db| {
                        for ((d, x), y) in db.iter_mut().zip(av.data()).zip(bv.data()) {
                            *d -= k * (x - y);
                        }
                    });
                }
            }
            Op::Custom { x, grad, .. } => {
                if let Some(local) = grad {
                    let gv = g.item();
                    self.accum_with(grads, *x, |dx| {
                        for (d, l) in dx.iter_mut().zip(local.data()) {
                            *d += gv * l;
                        }
                    });
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Evaluates a scalar loss over `params` and returns it with the gradient
/// of every parameter.
pub fn grad<'a, F>(params: &'a ParamSet, loss_fn: F) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&mut Graph<'a>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = g.bind(params, true);
    let loss = loss_fn(&mut g, &bound)?;
    if g.value(loss).len() != 1 {
        return Err(Error::Shape(format!("loss must be scalar, got {:?}", g.value(loss).shape())));
    }
    g.check_finite(loss)?;
    let grads = g.backward(loss);
    Ok((g.value(loss).item(), grads.collect(params, &bound)?))
}
