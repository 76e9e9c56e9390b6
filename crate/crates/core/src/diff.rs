//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! Every value on a [`Tape`] is a 2-D [`Tensor`]; scalars are `1×1`. Ops are
//! recorded in execution order, so the node list is already topologically
//! sorted and [`Tape::backward`] is a single reverse sweep.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![values.len()],
            });
        }
        Ok(Self { shape, values })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            values: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1, 1],
            values: vec![x],
        }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Self {
            shape: vec![1, values.len()],
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: vec![0, 0],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    SoftmaxCe {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    LogSoftmaxMasked {
        input: Var,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
    Select(Var, usize),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Transpose(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf (parameter or constant input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.dims2("matmul")?;
        let (k2, m) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let x = ta.values[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &tb.values[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.dims2("matmul_nt")?;
        let (m, k2) = tb.dims2("matmul_nt")?;
        if k != k2 {
            return Err(dim_err("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &ta.values[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &tb.values[j * k..(j + 1) * k];
                out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMulNt(a, b)))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        rec: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(dim_err(op, ta, tb));
        }
        let values = ta.values.iter().zip(&tb.values).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, values }, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    /// Adds a `1×c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (n, c) = ta.dims2("add_row")?;
        if tb.shape != [1, c] {
            return Err(dim_err("add_row", ta, tb));
        }
        let mut values = ta.values.clone();
        for row in values.chunks_mut(c) {
            for (x, &b) in row.iter_mut().zip(&tb.values) {
                *x += b;
            }
        }
        Ok(self.push(Tensor::matrix(n, c, values)?, Op::AddRow(a, bias)))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let value = Tensor {
            shape: ta.shape.clone(),
            values: ta.values.iter().map(|&x| f(x)).collect(),
        };
        self.push(value, op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| s * x, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::Shift(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Embedding lookup: row `indices[r]` of `table` becomes output row `r`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, c) = t.dims2("gather_rows")?;
        let mut values = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= n {
                return Err(Error::Dimension {
                    op: "gather_rows",
                    left: t.shape.clone(),
                    right: vec![i],
                });
            }
            values.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::matrix(indices.len(), c, values)?;
        Ok(self.push(out, Op::GatherRows(table, indices.to_vec())))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, ca) = ta.dims2("concat_cols")?;
        let (n2, cb) = tb.dims2("concat_cols")?;
        if n != n2 {
            return Err(dim_err("concat_cols", ta, tb));
        }
        let mut values = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            values.extend_from_slice(ta.row_slice(r));
            values.extend_from_slice(tb.row_slice(r));
        }
        Ok(self.push(Tensor::matrix(n, ca + cb, values)?, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (n, c) = ta.dims2("slice_cols")?;
        if start > end || end > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: ta.shape.clone(),
                right: vec![start, end],
            });
        }
        let mut values = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            values.extend_from_slice(&ta.row_slice(r)[start..end]);
        }
        Ok(self.push(Tensor::matrix(n, end - start, values)?, Op::SliceCols(a, start)))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (n, c) = ta.dims2("mean_rows")?;
        if n == 0 {
            return Err(Error::contract("mean_rows over zero rows"));
        }
        let mut values = vec![0.0; c];
        for r in 0..n {
            for (acc, &x) in values.iter_mut().zip(ta.row_slice(r)) {
                *acc += x / n as f64;
            }
        }
        Ok(self.push(Tensor::row(values), Op::MeanRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (n, c) = ta.dims2("transpose")?;
        let mut values = vec![0.0; n * c];
        for r in 0..n {
            for k in 0..c {
                values[k * n + r] = ta.values[r * c + k];
            }
        }
        Ok(self.push(Tensor::matrix(c, n, values)?, Op::Transpose(a)))
    }

    /// Picks one entry (row-major flat index) as a `1×1` value.
    pub fn select(&mut self, a: Var, flat_index: usize) -> Result<Var> {
        let ta = self.value(a);
        let x = *ta.values.get(flat_index).ok_or_else(|| Error::Dimension {
            op: "select",
            left: ta.shape.clone(),
            right: vec![flat_index],
        })?;
        Ok(self.push(Tensor::scalar(x), Op::Select(a, flat_index)))
    }

    /// Mean cross-entropy over the rows that carry a target. Softmax is
    /// taken per row after subtracting the row max.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, c) = tl.dims2("softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                left: tl.shape.clone(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        let mut count = 0;
        for r in 0..n {
            let Some(t) = targets[r] else { continue };
            if t >= c {
                return Err(Error::Dimension {
                    op: "softmax_cross_entropy",
                    left: tl.shape.clone(),
                    right: vec![t],
                });
            }
            let row = tl.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for (p, x) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (x - max).exp() / z;
            }
            loss += z.ln() + max - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(Error::contract("softmax_cross_entropy without any target"));
        }
        let op = Op::SoftmaxCe {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        Ok(self.push(Tensor::scalar(loss / count as f64), op))
    }

    /// Log-softmax over all entries of `a` whose mask is true; masked-out
    /// entries become `-inf`.
    pub fn log_softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(Error::Dimension {
                op: "log_softmax_masked",
                left: ta.shape.clone(),
                right: vec![mask.len()],
            });
        }
        let max = ta
            .values
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&x, _)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::contract("log_softmax_masked with no valid entry"));
        }
        let lse = max
            + ta.values
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&x, _)| (x - max).exp())
                .sum::<f64>()
                .ln();
        let values: Vec<f64> = ta
            .values
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { x - lse } else { f64::NEG_INFINITY })
            .collect();
        let probs = values.iter().map(|y| y.exp()).collect();
        let shape = ta.shape.clone();
        let op = Op::LogSoftmaxMasked {
            input: a,
            mask: mask.to_vec(),
            probs,
        };
        Ok(self.push(Tensor { shape, values }, op))
    }

    /// Reverse sweep from a scalar output. Every node gets a gradient;
    /// nodes that do not influence `loss` get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = self.value(loss);
        if out.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                out.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k) = (ta.rows(), ta.cols());
                    let m = tb.cols();
                    let mut da = vec![0.0; n * k];
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &tb.values[p * m..(p + 1) * m];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            let x = ta.values[i * k + p];
                            if x != 0.0 {
                                for (d, &gv) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                    *d += x * gv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k) = (ta.rows(), ta.cols());
                    let m = tb.rows();
                    let mut da = vec![0.0; n * k];
                    let mut db = vec![0.0; m * k];
                    for i in 0..n {
                        let arow = &ta.values[i * k..(i + 1) * k];
                        for j in 0..m {
                            let gv = g[i * m + j];
                            if gv == 0.0 {
                                continue;
                            }
                            let brow = &tb.values[j * k..(j + 1) * k];
                            for p in 0..k {
                                da[i * k + p] += gv * brow[p];
                                db[j * k + p] += gv * arow[p];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.iter().map(|x| -x).collect());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = g.iter().zip(&tb.values).map(|(x, y)| x * y).collect();
                    let db = g.iter().zip(&ta.values).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Minimum(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mut da = vec![0.0; g.len()];
                    let mut db = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        if ta.values[i] <= tb.values[i] {
                            da[i] = g[i];
                        } else {
                            db[i] = g[i];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, bias) => {
                    let c = y.cols();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.iter().map(|x| s * x).collect()),
                Op::Shift(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Tanh(a) => {
                    let d = g.iter().zip(&y.values).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.iter().zip(&y.values).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::Exp(a) => {
                    let d = g.iter().zip(&y.values).map(|(gv, e)| gv * e).collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let ta = self.value(*a);
                    let d = g
                        .iter()
                        .zip(&ta.values)
                        .map(|(gv, &x)| if x > *lo && x < *hi { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::GatherRows(table, indices) => {
                    let tt = self.value(*table);
                    let c = tt.cols();
                    let mut d = vec![0.0; tt.len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for (dst, &x) in d[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *dst += x;
                        }
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let mut da = Vec::with_capacity(g.len());
                    let mut db = Vec::with_capacity(g.len());
                    for row in g.chunks(ca + cb) {
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::SliceCols(a, start) => {
                    let ta = self.value(*a);
                    let c = ta.cols();
                    let w = y.cols();
                    let mut d = vec![0.0; ta.len()];
                    for (r, row) in g.chunks(w.max(1)).enumerate().take(y.rows()) {
                        d[r * c + start..r * c + start + w].copy_from_slice(row);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::MeanRows(a) => {
                    let ta = self.value(*a);
                    let n = ta.rows() as f64;
                    let mut d = Vec::with_capacity(ta.len());
                    for _ in 0..ta.rows() {
                        d.extend(g.iter().map(|x| x / n));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Transpose(a) => {
                    let (n, c) = (y.rows(), y.cols());
                    let mut d = vec![0.0; n * c];
                    for r in 0..n {
                        for k in 0..c {
                            d[k * n + r] = g[r * c + k];
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Select(a, i) => {
                    let mut d = vec![0.0; self.value(*a).len()];
                    d[*i] = g[0];
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxCe {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let c = self.value(*logits).cols();
                    let scale = g[0] / *count as f64;
                    let mut d = vec![0.0; probs.len()];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for j in 0..c {
                            d[r * c + j] = probs[r * c + j] * scale;
                        }
                        d[r * c + t] -= scale;
                    }
                    accumulate(&mut grads, *logits, d);
                }
                Op::LogSoftmaxMasked { input, mask, probs } => {
                    let total: f64 = g.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x).sum();
                    let d = g
                        .iter()
                        .zip(mask)
                        .zip(probs)
                        .map(|((gv, &m), p)| if m { gv - p * total } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *input, d);
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.unwrap_or_else(|| vec![0.0; n.value.len()]))
                .collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(d) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct Gradients {
    grads: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shapes[v.0].clone(),
            values: self.grads[v.0].clone(),
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Descends along `grads`. Pass negated gradients to ascend.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract("adam: parameter/gradient count mismatch"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || self.m[i].len() != g.len() {
                return Err(Error::Dimension {
                    op: "adam",
                    left: p.shape.clone(),
                    right: vec![g.len()],
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let x = &mut p.values[j];
                *x -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *x);
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors persisted as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("checkpoint has no tensor named {name:?}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::contract(format!(
                "checkpoint version {} is not supported",
                ck.version
            )));
        }
        for (name, t) in &ck.tensors {
            if t.shape.iter().product::<usize>() != t.values.len() {
                return Err(Error::contract(format!("tensor {name:?} has inconsistent shape")));
            }
        }
        Ok(ck)
    }
}

#[cfg(test)]
pub(crate) mod testing {

    /// Central finite differences of `f` around `x`.
    pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = probe[i];
                probe[i] = orig + h;
                let up = f(&probe);
                probe[i] = orig - h;
                let down = f(&probe);
                probe[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    pub fn assert_grads_close(analytic: &[f64], numeric: &[f64], rel: f64) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let scale = a.abs().max(n.abs()).max(1e-4);
            assert!(
                (a - n).abs() / scale < rel,
                "coordinate {i}: analytic {a} vs numeric {n}"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn uniform_cross_entropy_is_ln3() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::row(vec![0.0, 0.0, 0.0]));
        let loss = tape.softmax_cross_entropy(logits, &[Some(1)]).unwrap();
        assert!((tape.value(loss).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::row(vec![1000.0, 0.0]));
        let loss = tape.softmax_cross_entropy(logits, &[Some(0)]).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let eye = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let av = tape.leaf(a.clone());
        let out = tape.matmul(eye, av).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 3));
        match tape.matmul(a, b) {
            Err(Error::Dimension { op, left, right }) => {
                assert_eq!(op, "matmul");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}", other = other.map(|v| v.index())),
        }
    }

    #[test]
    fn tanh_grad_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.tanh(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x), &[1.0]);
    }

    #[test]
    fn sum_grad_is_ones_and_square_grad_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        let s = tape.sum(x);
        assert_eq!(tape.backward(s).unwrap().get(x), &[1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        let sq = tape.matmul_nt(x, x).unwrap();
        assert_eq!(tape.backward(sq).unwrap().get(x), &[2.0, 4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::row(vec![3.0]));
        let s = tape.sum(x);
        assert_eq!(tape.backward(s).unwrap().get(unused), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    /// Three-layer net over every op family except the policy-only ones.
    fn three_layer(params: &[f64], x: &Tensor) -> (Tape, Var, Vec<Var>) {
        let mut tape = Tape::new();
        let mut it = params.iter().cloned();
        let mut take = |r: usize, c: usize| Tensor::matrix(r, c, it.by_ref().take(r * c).collect()).unwrap();
        let (w1, b1, w2, w3, emb) = (take(3, 4), take(1, 4), take(4, 4), take(6, 5), take(5, 2));
        let leaves: Vec<Var> = [w1, b1, w2, w3, emb].into_iter().map(|t| tape.leaf(t)).collect();
        let xin = tape.leaf(x.clone());
        let h = tape.matmul(xin, leaves[0]).unwrap();
        let h = tape.add_row(h, leaves[1]).unwrap();
        let h = tape.tanh(h);
        let g = tape.matmul(h, leaves[2]).unwrap();
        let g = tape.sigmoid(g);
        let gm = tape.one_minus(g);
        let h2 = tape.mul(gm, h).unwrap();
        let e = tape.gather_rows(leaves[4], &[1, 3]).unwrap();
        let cat = tape.concat_cols(h2, e).unwrap();
        let logits = tape.matmul(cat, leaves[3]).unwrap();
        let a = tape.slice_cols(logits, 0, 3).unwrap();
        let b = tape.slice_cols(logits, 2, 5).unwrap();
        let mixed = tape.sub(a, b).unwrap();
        let mixed = tape.exp(mixed);
        let mean = tape.mean_rows(mixed).unwrap();
        let t = tape.transpose(mean).unwrap();
        let s = tape.sum(t);
        let ce = tape.softmax_cross_entropy(logits, &[Some(2), None]).unwrap();
        let loss = tape.add(ce, s).unwrap();
        let loss = tape.scale(loss, 0.7);
        (tape, loss, leaves)
    }

    #[test]
    fn three_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n_params = 12 + 4 + 16 + 30 + 10;
        let params: Vec<f64> = (0..n_params).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let x = rand_tensor(&mut rng, 2, 3);
        let (tape, loss, leaves) = three_layer(&params, &x);
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<f64> = leaves.iter().flat_map(|&v| grads.get(v).to_vec()).collect();
        let numeric = numeric_grad(&params, 1e-4, |p| {
            let (t, l, _) = three_layer(p, &x);
            t.value(l).item()
        });
        assert_grads_close(&analytic, &numeric, 1e-3);
    }

    #[test]
    fn masked_log_softmax_and_clipping_match_finite_differences() {
        let build = |p: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::matrix(4, 1, p.to_vec()).unwrap());
            let lp = tape.log_softmax_masked(x, &[true, false, true, true]).unwrap();
            let a = tape.select(lp, 0).unwrap();
            let b = tape.select(lp, 3).unwrap();
            let ra = tape.exp(a);
            let rb = tape.exp(b);
            let ca = tape.clamp(ra, 0.1, 0.3);
            let m = tape.minimum(ca, rb).unwrap();
            let out = tape.add(m, a).unwrap();
            (tape, out, x)
        };
        let p = [0.3, -2.0, 0.1, -0.4];
        let (tape, out, x) = build(&p);
        let analytic = tape.backward(out).unwrap().get(x).to_vec();
        let numeric = numeric_grad(&p, 1e-5, |q| {
            let (t, o, _) = build(q);
            t.value(o).item()
        });
        assert_grads_close(&analytic, &numeric, 1e-3);
        assert_eq!(analytic[1], 0.0);
    }

    #[test]
    fn backward_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params: Vec<f64> = (0..72).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let x = rand_tensor(&mut rng, 2, 3);
        let (tape, loss, leaves) = three_layer(&params, &x);
        let a = tape.backward(loss).unwrap();
        let b = tape.backward(loss).unwrap();
        for v in leaves {
            assert_eq!(a.get(v), b.get(v));
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = Tensor::row(vec![3.0, -2.0]);
        let mut adam = Adam::new(0.1, 0.0);
        for _ in 0..500 {
            let g: Vec<f64> = x.values.iter().map(|v| 2.0 * v).collect();
            adam.step(&mut [&mut x], &[&g]).unwrap();
        }
        assert!(x.values.iter().all(|v| v.abs() < 1e-2), "{:?}", x.values);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), rand_tensor(&mut rng, 3, 7));
        map.insert("b".to_string(), Tensor::row(vec![1e-300, -0.1, 1.0 / 3.0]));
        let ck = Checkpoint::new(map);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    proptest! {
        #[test]
        fn elementwise_ops_match_finite_differences(
            vals in proptest::collection::vec(-2.0f64..2.0, 6),
            other in proptest::collection::vec(-2.0f64..2.0, 6),
        ) {
            let build = |p: &[f64]| {
                let mut tape = Tape::new();
                let x = tape.leaf(Tensor::matrix(2, 3, p.to_vec()).unwrap());
                let y = tape.leaf(Tensor::matrix(2, 3, other.clone()).unwrap());
                let t = tape.tanh(x);
                let s = tape.sigmoid(x);
                let m = tape.mul(t, y).unwrap();
                let a = tape.add(m, s).unwrap();
                let mt = tape.matmul_nt(a, y).unwrap();
                let out = tape.sum(mt);
                (tape, out, x)
            };
            let (tape, out, x) = build(&vals);
            let analytic = tape.backward(out).unwrap().get(x).to_vec();
            let numeric = numeric_grad(&vals, 1e-5, |q| {
                let (t, o, _) = build(q);
                t.value(o).item()
            });
            for (a, n) in analytic.iter().zip(&numeric) {
                let scale = a.abs().max(n.abs()).max(1e-3);
                prop_assert!((a - n).abs() / scale < 1e-3);
            }
        }
    }
}
