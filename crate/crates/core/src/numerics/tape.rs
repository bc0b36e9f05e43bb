//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameter leaves
//! borrow their values from the [`ParamStore`], so building a tape never copies
//! model weights. [`Tape::backward`] returns [`Gradients`] that the caller folds
//! into the store; gradients from repeated uses of a parameter add up.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::numerics::functions::{sigmoid_scalar, softmax_in_place, softplus_scalar, COSINE_EPS};
use crate::numerics::params::{Gradients, ParamId, ParamStore};
use crate::numerics::tensor::{dot, norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulRow(Var, Var),
    ScaleByCol {
        x: Var,
        w: Var,
        col: usize,
    },
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Sum(Var),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same leaf.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn row_operand(&self, a: Var, row: Var, what: &str) -> Result<()> {
        let (r, c) = self.shape(row);
        if r != 1 || c != self.shape(a).1 {
            return Err(shape_err(format!(
                "{what}: row operand {:?} for {:?}",
                (r, c),
                self.shape(a)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_bt(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulBt(a, b), ng))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_raw(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |p, q| p + q);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |p, q| p - q);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |p, q| p * q);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    fn broadcast_row(&self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, r) = (self.value(a), self.value(row));
        let cols = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, r.data()[i % cols]))
            .collect();
        Tensor::from_raw(x.rows(), cols, data)
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_operand(a, row, "add_row")?;
        let out = self.broadcast_row(a, row, |p, q| p + q);
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn sub_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_operand(a, row, "sub_row")?;
        let out = self.broadcast_row(a, row, |p, q| p - q);
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::SubRow(a, row), ng))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_operand(a, row, "mul_row")?;
        let out = self.broadcast_row(a, row, |p, q| p * q);
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::MulRow(a, row), ng))
    }

    /// Scales row `i` of `x` by `w[i, col]`.
    pub fn scale_by_col(&mut self, x: Var, w: Var, col: usize) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        let (wr, wc) = self.shape(w);
        if wr != xr || col >= wc {
            return Err(shape_err(format!(
                "scale_by_col: weights {:?}, column {col}, input {:?}",
                (wr, wc),
                (xr, xc)
            )));
        }
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = xv.clone();
        for i in 0..xr {
            let s = wv.get(i, col);
            out.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(out, Op::ScaleByCol { x, w, col }, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_scalar);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus_scalar);
        let ng = self.ng(a);
        self.push(out, Op::Softplus(a), ng)
    }

    /// Row-wise softmax. With `causal`, row `i` only covers columns `0..=i`
    /// and the remaining entries are exactly zero.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Result<Var> {
        let x = self.value(a);
        if x.cols() == 0 {
            return Err(Error::Empty("softmax_rows".into()));
        }
        if causal && x.rows() > x.cols() {
            return Err(shape_err("causal softmax needs rows <= cols"));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let width = if causal { i + 1 } else { row.len() };
            softmax_in_place(&mut row[..width]);
            row[width..].iter_mut().for_each(|v| *v = 0.0);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let cols = x.cols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols;
            let s = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm { x: a, inv_std }, ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= x.rows() {
                return Err(shape_err(format!("row {i} of {} rows", x.rows())));
            }
            data.extend_from_slice(x.row(i));
        }
        let out = Tensor::from_raw(idx.len(), cols, data);
        let ng = self.ng(a);
        Ok(self.push(
            out,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(shape_err(format!("columns {start}..{} of {}", start + len, x.cols())));
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for i in 0..x.rows() {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let out = Tensor::from_raw(x.rows(), len, data);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols { x: a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::Empty("concat_cols".into()))?;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(shape_err("concat_cols: row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_raw(rows, cols, data);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| Error::Empty("concat_rows".into()))?;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(shape_err("concat_rows: column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::from_raw(rows, cols, data);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Scales each row to unit L2 norm. Zero rows are an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = norm(row);
            if n <= COSINE_EPS {
                return Err(Error::ZeroNorm(format!("row {i}")));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::NormalizeRows { x: a, norms }, ng))
    }

    /// Mean over rows of `-log softmax(row)[target]`. Entries where `mask` is
    /// false are excluded from that row's softmax; the target must stay allowed.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(logits);
        let (rows, cols) = x.shape();
        if rows == 0 || targets.len() != rows {
            return Err(shape_err(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(shape_err("cross_entropy: mask size"));
            }
        }
        let allowed = |i: usize, j: usize| mask.is_none_or(|m| m[i * cols + j]);
        let mut probs = Tensor::zeros(rows, cols);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= cols || !allowed(i, t) {
                return Err(shape_err(format!("cross_entropy: target {t} in row {i}")));
            }
            let row = x.row(i);
            let argmax = (0..cols)
                .filter(|&j| allowed(i, j))
                .fold(t, |best, j| if row[j] > row[best] { j } else { best });
            let max = row[argmax];
            // log-sum-exp as max + ln(1 + rest), exact for a dominant logit
            let mut rest = 0.0;
            for j in (0..cols).filter(|&j| allowed(i, j)) {
                let e = (row[j] - max).exp();
                probs.set(i, j, e);
                if j != argmax {
                    rest += e;
                }
            }
            let total = 1.0 + rest;
            probs.row_mut(i).iter_mut().for_each(|p| *p /= total);
            loss += max - row[t] + rest.ln_1p();
        }
        loss /= rows as f64;
        let out = Tensor::from_raw(1, 1, vec![loss]);
        let ng = self.ng(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::from_raw(1, 1, vec![self.value(a).sum()]);
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// Gradients of the scalar `loss` with respect to every bound parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(shape_err(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        self.value(loss).ensure_finite("loss")?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let y = self.value(Var(idx));
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    g.ensure_finite(&self.store.leaf(*id).name)?;
                    out.push(*id, g);
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = g.matmul_bt(self.value(*b))?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = self.value(*a).matmul_at(&g)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulBt(a, b) => {
                    if self.ng(*a) {
                        let ga = g.matmul(self.value(*b))?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = g.matmul_at(self.value(*a))?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let ga = elementwise(&g, self.value(*b), |p, q| p * q);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = elementwise(&g, self.value(*a), |p, q| p * q);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddRow(a, r) | Op::SubRow(a, r) => {
                    let sign = if matches!(node.op, Op::SubRow(..)) { -1.0 } else { 1.0 };
                    if self.ng(*r) {
                        let mut gr = column_sums(&g);
                        gr.data_mut().iter_mut().for_each(|v| *v *= sign);
                        accumulate(&mut grads, *r, gr);
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    let (xa, xr) = (self.value(*a), self.value(*r));
                    if self.ng(*r) {
                        let prod = elementwise(&g, xa, |p, q| p * q);
                        accumulate(&mut grads, *r, column_sums(&prod));
                    }
                    if self.ng(*a) {
                        let cols = g.cols();
                        let data = g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, &v)| v * xr.data()[i % cols])
                            .collect();
                        accumulate(&mut grads, *a, Tensor::from_raw(g.rows(), cols, data));
                    }
                }
                Op::ScaleByCol { x, w, col } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if self.ng(*w) {
                        let mut gw = Tensor::zeros(wv.rows(), wv.cols());
                        for i in 0..xv.rows() {
                            gw.set(i, *col, dot(g.row(i), xv.row(i)));
                        }
                        accumulate(&mut grads, *w, gw);
                    }
                    if self.ng(*x) {
                        let mut gx = g;
                        for i in 0..gx.rows() {
                            let s = wv.get(i, *col);
                            gx.row_mut(i).iter_mut().for_each(|v| *v *= s);
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|v| v * c)),
                Op::Sigmoid(a) => {
                    let ga = elementwise(&g, y, |gv, s| gv * s * (1.0 - s));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = elementwise(&g, y, |gv, t| gv * (1.0 - t * t));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = elementwise(&g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = elementwise(&g, self.value(*a), |gv, x| gv * sigmoid_scalar(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let inner = dot(yr, gr);
                        for (o, (&p, &gv)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = p * (gv - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, inv_std } => {
                    let cols = y.cols() as f64;
                    let mut gx = Tensor::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let mean_g = gr.iter().sum::<f64>() / cols;
                        let mean_gy = dot(yr, gr) / cols;
                        for (o, (&yv, &gv)) in gx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = inv_std[i] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GatherRows { x, idx } => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Tensor::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Tensor::zeros(r, c);
                    let len = g.cols();
                    for i in 0..r {
                        gx.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        if self.ng(p) {
                            let mut gp = Tensor::zeros(r, c);
                            for i in 0..r {
                                gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        if self.ng(p) {
                            let data = g.data()[offset * c..(offset + r) * c].to_vec();
                            accumulate(&mut grads, p, Tensor::from_raw(r, c, data));
                        }
                        offset += r;
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    let mut gx = Tensor::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let inner = dot(yr, gr);
                        for (o, (&yv, &gv)) in gx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = (gv - yv * inner) / norms[i];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = g.data()[0] / targets.len() as f64;
                    let mut gl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let v = gl.get(i, t);
                        gl.set(i, t, v - 1.0);
                    }
                    gl.data_mut().iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads, *logits, gl);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads, *a, Tensor::filled(r, c, g.data()[0]));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_scaled(&g, 1.0),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::from_raw(a.rows(), a.cols(), data)
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}
