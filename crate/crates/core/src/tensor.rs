//! Dense matrix reverse-mode autodiff.
//!
//! Every value is a row-major `rows × cols` matrix of `f64`. A [`Tape`]
//! records the operations of one forward pass; [`Tape::backward`] walks the
//! record in reverse and returns the gradient of a scalar loss with respect
//! to every parameter that was read from the borrowed [`ParamStore`].
//!
//! Parameters are never copied onto the tape. A tape borrows its store
//! immutably, so gradients are handed back as a [`Gradients`] value and
//! folded into the store with [`ParamStore::accumulate`] once the tape is
//! gone.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower clamp applied inside `log`, cross-entropy and KL.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: index {index} out of range for bound {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward requires a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        f.debug_list().entries(self.data.iter().take(12)).finish()
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Invalid(format!(
                "buffer of {} values cannot be shaped {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Plain product without taping.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Numerically stable softmax along `axis` (1 = within each row).
    pub fn softmax(&self, axis: usize) -> Matrix {
        if axis == 0 {
            return self.transposed().softmax(1).transposed();
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    /// Index of the largest entry in each row; the first maximum wins.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// Stable handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softmax(Var, usize),
    Log(Var),
    Abs(Var),
    Sum(Var),
    MeanPool(Var, Vec<usize>),
    PickRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    WeightedGather {
        weights: Var,
        values: Var,
        src: Vec<usize>,
        dst: Vec<usize>,
    },
    CrossEntropy(Var, Vec<usize>),
    KlDivergence(Matrix, Var),
}

struct Node {
    value: Option<Matrix>,
    op: Op,
}

/// One forward pass worth of recorded operations.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter, produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, op: &'static str, value: Matrix, record: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        self.nodes.push(Node {
            value: Some(value),
            op: record,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant with no gradient path.
    pub fn input(&mut self, value: Matrix) -> Result<Var> {
        self.push("input", value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| TensorError::Invalid(format!("unknown parameter `{name}`")))?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", x, y));
        }
        let mut out = x.clone();
        out.add_assign(y);
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("sub", x, y));
        }
        let mut out = x.clone();
        for (o, v) in out.data.iter_mut().zip(&y.data) {
            *o -= v;
        }
        self.push("sub", out, Op::Sub(a, b))
    }

    /// `a` (n×m) plus row vector `b` (1×m) added to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if y.rows != 1 || y.cols != x.cols {
            return Err(shape_err("add_row", x, y));
        }
        let mut out = x.clone();
        for r in 0..out.rows {
            for (o, v) in out.row_mut(r).iter_mut().zip(&y.data) {
                *o += v;
            }
        }
        self.push("add_row", out, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        self.push("scale", out, Op::Scale(a, factor))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transposed();
        self.push("transpose", out, Op::Transpose(a))
    }

    /// Concatenation along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero arrays".into()))?;
        let (r0, c0) = self.shape(first);
        let out = match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let m = self.value(*p);
                    if m.cols != c0 {
                        return Err(shape_err("concat", self.value(first), m));
                    }
                    rows += m.rows;
                    data.extend_from_slice(&m.data);
                }
                Matrix {
                    rows,
                    cols: c0,
                    data,
                }
            }
            1 => {
                let mut cols = 0;
                for p in parts {
                    let m = self.value(*p);
                    if m.rows != r0 {
                        return Err(shape_err("concat", self.value(first), m));
                    }
                    cols += m.cols;
                }
                let mut out = Matrix::zeros(r0, cols);
                for r in 0..r0 {
                    let mut offset = 0;
                    for p in parts {
                        let m = self.value(*p);
                        out.row_mut(r)[offset..offset + m.cols].copy_from_slice(m.row(r));
                        offset += m.cols;
                    }
                }
                out
            }
            _ => return Err(TensorError::Invalid(format!("concat axis {axis}"))),
        };
        self.push("concat", out, Op::Concat(parts.to_vec(), axis))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data
            .iter_mut()
            .for_each(|v| *v = if *v > 0.0 { *v } else { *v * slope });
        self.push("leaky_relu", out, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push("sigmoid", out, Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis > 1 {
            return Err(TensorError::Invalid(format!("softmax axis {axis}")));
        }
        let out = self.value(a).softmax(axis);
        self.push("softmax", out, Op::Softmax(a, axis))
    }

    /// Natural log with inputs clamped at [`LOG_EPS`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(LOG_EPS).ln());
        self.push("log", out, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v = v.abs());
        self.push("abs", out, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push("sum", Matrix::filled(1, 1, s), Op::Sum(a))
    }

    /// Mean of the selected rows as a 1×m row; the empty set pools to zero.
    pub fn mean_pool(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut out = Matrix::zeros(1, x.cols);
        for &r in rows {
            if r >= x.rows {
                return Err(TensorError::Index {
                    op: "mean_pool",
                    index: r,
                    bound: x.rows,
                });
            }
            for (o, v) in out.data.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        if !rows.is_empty() {
            let n = rows.len() as f64;
            out.data.iter_mut().for_each(|v| *v /= n);
        }
        self.push("mean_pool", out, Op::MeanPool(a, rows.to_vec()))
    }

    /// Gather rows by index; repeats are allowed.
    pub fn pick_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * x.cols);
        for &r in rows {
            if r >= x.rows {
                return Err(TensorError::Index {
                    op: "pick_rows",
                    index: r,
                    bound: x.rows,
                });
            }
            data.extend_from_slice(x.row(r));
        }
        let out = Matrix {
            rows: rows.len(),
            cols: x.cols,
            data,
        };
        self.push("pick_rows", out, Op::PickRows(a, rows.to_vec()))
    }

    /// Place row k of `a` at row `rows[k]` of an otherwise zero `n_rows`-row matrix.
    pub fn scatter_rows(&mut self, a: Var, rows: &[usize], n_rows: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows != rows.len() {
            return Err(TensorError::Invalid(format!(
                "scatter_rows: {} source rows for {} targets",
                x.rows,
                rows.len()
            )));
        }
        let mut out = Matrix::zeros(n_rows, x.cols);
        for (k, &r) in rows.iter().enumerate() {
            if r >= n_rows {
                return Err(TensorError::Index {
                    op: "scatter_rows",
                    index: r,
                    bound: n_rows,
                });
            }
            for (o, v) in out.row_mut(r).iter_mut().zip(x.row(k)) {
                *o += v;
            }
        }
        self.push(
            "scatter_rows",
            out,
            Op::ScatterRows(a, rows.to_vec()),
        )
    }

    /// Softmax of a column of scores within groups; `groups[e]` names the group of row e.
    pub fn segment_softmax(&mut self, a: Var, groups: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.cols != 1 || x.rows != groups.len() {
            return Err(TensorError::Invalid(format!(
                "segment_softmax expects {}x1 scores, got {:?}",
                groups.len(),
                x.shape()
            )));
        }
        let n_groups = groups.iter().max().map_or(0, |g| g + 1);
        let mut max = vec![f64::NEG_INFINITY; n_groups];
        for (v, &g) in x.data.iter().zip(groups) {
            max[g] = max[g].max(*v);
        }
        let mut out = x.clone();
        let mut sum = vec![0.0; n_groups];
        for (v, &g) in out.data.iter_mut().zip(groups) {
            *v = (*v - max[g]).exp();
            sum[g] += *v;
        }
        for (v, &g) in out.data.iter_mut().zip(groups) {
            *v /= sum[g];
        }
        self.push(
            "segment_softmax",
            out,
            Op::SegmentSoftmax(a, groups.to_vec()),
        )
    }

    /// `out[dst[e]] += weights[e] * values[src[e]]` over an edge list; `out` has `n_out` rows.
    pub fn weighted_gather(
        &mut self,
        weights: Var,
        values: Var,
        src: &[usize],
        dst: &[usize],
        n_out: usize,
    ) -> Result<Var> {
        let (w, x) = (self.value(weights), self.value(values));
        if w.cols != 1 || w.rows != src.len() || src.len() != dst.len() {
            return Err(shape_err("weighted_gather", w, x));
        }
        let mut out = Matrix::zeros(n_out, x.cols);
        for e in 0..src.len() {
            if src[e] >= x.rows || dst[e] >= n_out {
                return Err(TensorError::Index {
                    op: "weighted_gather",
                    index: src[e].max(dst[e]),
                    bound: x.rows.min(n_out),
                });
            }
            let a = w.data[e];
            let cols = x.cols;
            for c in 0..cols {
                out.data[dst[e] * cols + c] += a * x.data[src[e] * cols + c];
            }
        }
        self.push(
            "weighted_gather",
            out,
            Op::WeightedGather {
                weights,
                values,
                src: src.to_vec(),
                dst: dst.to_vec(),
            },
        )
    }

    /// Sum over rows of `-ln dist[r, gold[r]]` for row-stochastic `dist`.
    pub fn cross_entropy(&mut self, dist: Var, gold: &[usize]) -> Result<Var> {
        let d = self.value(dist);
        if d.rows != gold.len() {
            return Err(TensorError::Invalid(format!(
                "cross_entropy: {} rows vs {} gold labels",
                d.rows,
                gold.len()
            )));
        }
        let mut loss = 0.0;
        for (r, &g) in gold.iter().enumerate() {
            if g >= d.cols {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: g,
                    bound: d.cols,
                });
            }
            let row_sum: f64 = d.row(r).iter().sum();
            if (row_sum - 1.0).abs() > 1e-6 {
                return Err(TensorError::Invalid(format!(
                    "cross_entropy: row {r} sums to {row_sum}"
                )));
            }
            loss -= d.get(r, g).max(LOG_EPS).ln();
        }
        self.push(
            "cross_entropy",
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy(dist, gold.to_vec()),
        )
    }

    /// `Σ p · ln(p / q)` summed over every entry, with `p` held constant.
    pub fn kl_divergence(&mut self, target: &Matrix, model: Var) -> Result<Var> {
        let q = self.value(model);
        if q.shape() != target.shape() {
            return Err(shape_err("kl_divergence", target, q));
        }
        let kl = kl_value(target, q);
        self.push(
            "kl_divergence",
            Matrix::filled(1, 1, kl),
            Op::KlDivergence(target.clone(), model),
        )
    }

    /// Reverse sweep from a 1×1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, delta: Matrix| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match out.by_param.get_mut(id) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        out.by_param.insert(*id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transposed())?;
                    let db = self.value(*a).transposed().matmul(&g)?;
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.data.iter_mut().for_each(|v| *v = -*v);
                    acc(*a, g);
                    acc(*b, neg);
                }
                Op::AddRow(a, b) => {
                    let mut db = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in db.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*a, g);
                    acc(*b, db);
                }
                Op::Scale(a, f) => {
                    let mut d = g;
                    d.data.iter_mut().for_each(|v| *v *= f);
                    acc(*a, d);
                }
                Op::Transpose(a) => acc(*a, g.transposed()),
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for p in parts {
                        let (pr, pc) = self.shape(*p);
                        let mut d = Matrix::zeros(pr, pc);
                        if *axis == 0 {
                            d.data
                                .copy_from_slice(&g.data[offset * pc..(offset + pr) * pc]);
                            offset += pr;
                        } else {
                            for r in 0..pr {
                                d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + pc]);
                            }
                            offset += pc;
                        }
                        acc(*p, d);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let mut d = g;
                    for (dv, xv) in d.data.iter_mut().zip(&x.data) {
                        if *xv <= 0.0 {
                            *dv *= slope;
                        }
                    }
                    acc(*a, d);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("sigmoid value");
                    let mut d = g;
                    for (dv, yv) in d.data.iter_mut().zip(&y.data) {
                        *dv *= yv * (1.0 - yv);
                    }
                    acc(*a, d);
                }
                Op::Softmax(a, axis) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let d = if *axis == 1 {
                        softmax_rows_backward(y, &g)
                    } else {
                        softmax_rows_backward(&y.transposed(), &g.transposed()).transposed()
                    };
                    acc(*a, d);
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    for (dv, xv) in d.data.iter_mut().zip(&x.data) {
                        *dv = if *xv > LOG_EPS { *dv / xv } else { 0.0 };
                    }
                    acc(*a, d);
                }
                Op::Abs(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    for (dv, xv) in d.data.iter_mut().zip(&x.data) {
                        // subgradient 0 at the kink
                        *dv *= if *xv > 0.0 {
                            1.0
                        } else if *xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                    acc(*a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(*a, Matrix::filled(r, c, g.data[0]));
                }
                Op::MeanPool(a, rows) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Matrix::zeros(r, c);
                    if !rows.is_empty() {
                        let inv = 1.0 / rows.len() as f64;
                        for &row in rows {
                            for (o, v) in d.row_mut(row).iter_mut().zip(&g.data) {
                                *o += v * inv;
                            }
                        }
                    }
                    acc(*a, d);
                }
                Op::PickRows(a, rows) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Matrix::zeros(r, c);
                    for (k, &row) in rows.iter().enumerate() {
                        for (o, v) in d.row_mut(row).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    acc(*a, d);
                }
                Op::ScatterRows(a, rows) => {
                    let mut data = Vec::with_capacity(rows.len() * g.cols);
                    for &row in rows {
                        data.extend_from_slice(g.row(row));
                    }
                    acc(
                        *a,
                        Matrix {
                            rows: rows.len(),
                            cols: g.cols,
                            data,
                        },
                    );
                }
                Op::SegmentSoftmax(a, groups) => {
                    let y = node.value.as_ref().expect("segment_softmax value");
                    let n_groups = groups.iter().max().map_or(0, |g| g + 1);
                    let mut dot = vec![0.0; n_groups];
                    for e in 0..groups.len() {
                        dot[groups[e]] += y.data[e] * g.data[e];
                    }
                    let mut d = Matrix::zeros(y.rows, 1);
                    for e in 0..groups.len() {
                        d.data[e] = y.data[e] * (g.data[e] - dot[groups[e]]);
                    }
                    acc(*a, d);
                }
                Op::WeightedGather {
                    weights,
                    values,
                    src,
                    dst,
                } => {
                    let w = self.value(*weights);
                    let x = self.value(*values);
                    let cols = x.cols;
                    let mut dw = Matrix::zeros(w.rows, 1);
                    let mut dx = Matrix::zeros(x.rows, cols);
                    for e in 0..src.len() {
                        let g_row = g.row(dst[e]);
                        let x_row = x.row(src[e]);
                        dw.data[e] = g_row.iter().zip(x_row).map(|(a, b)| a * b).sum();
                        let a = w.data[e];
                        for c in 0..cols {
                            dx.data[src[e] * cols + c] += a * g_row[c];
                        }
                    }
                    acc(*weights, dw);
                    acc(*values, dx);
                }
                Op::CrossEntropy(dist, gold) => {
                    let d = self.value(*dist);
                    let mut dd = Matrix::zeros(d.rows, d.cols);
                    for (r, &gi) in gold.iter().enumerate() {
                        let p = d.get(r, gi);
                        if p > LOG_EPS {
                            dd.set(r, gi, -g.data[0] / p);
                        }
                    }
                    acc(*dist, dd);
                }
                Op::KlDivergence(p, model) => {
                    let q = self.value(*model);
                    let mut dq = Matrix::zeros(q.rows, q.cols);
                    for ((o, pv), qv) in dq.data.iter_mut().zip(&p.data).zip(&q.data) {
                        if *pv > 0.0 && *qv > LOG_EPS {
                            *o = -g.data[0] * pv / qv;
                        }
                    }
                    acc(*model, dq);
                }
            }
        }
        Ok(out)
    }
}

fn softmax_rows_backward(y: &Matrix, g: &Matrix) -> Matrix {
    let mut d = Matrix::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let (yr, gr) = (y.row(r), g.row(r));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (o, (yv, gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
            *o = yv * (gv - dot);
        }
    }
    d
}

/// `Σ p ln(p/q)` with `0 ln 0 = 0` and `q` clamped at [`LOG_EPS`].
pub fn kl_value(p: &Matrix, q: &Matrix) -> f64 {
    p.data
        .iter()
        .zip(&q.data)
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(pv, qv)| pv * (pv.ln() - qv.max(LOG_EPS).ln()))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    value: Matrix,
    grad: Matrix,
    m: Matrix,
    v: Matrix,
}

/// Named parameters with their gradient accumulators and Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, ParamId>,
    step: u64,
}

pub const CHECKPOINT_MAGIC: &str = "HGSR-PARAMS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    magic: String,
    version: u32,
    params: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::Invalid(format!("duplicate parameter `{name}`")));
        }
        let (r, c) = value.shape();
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: Matrix::zeros(r, c),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Glorot-uniform initialization.
    pub fn insert_glorot<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.insert(name, Matrix::uniform(rows, cols, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].grad
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            self.entries[id.0].grad.add_assign(g);
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// One bias-corrected Adam update from the accumulated gradients, which are then cleared.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for e in &mut self.entries {
            for i in 0..e.value.data.len() {
                let g = e.grad.data[i];
                let m = cfg.beta1 * e.m.data[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * e.v.data[i] + (1.0 - cfg.beta2) * g * g;
                e.m.data[i] = m;
                e.v.data[i] = v;
                e.value.data[i] -= cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
                e.grad.data[i] = 0.0;
            }
        }
    }

    /// Parameter values only, for snapshot/restore.
    pub fn values(&self) -> Vec<Matrix> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore_values(&mut self, values: Vec<Matrix>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(TensorError::Invalid("snapshot size mismatch".into()));
        }
        for (e, v) in self.entries.iter_mut().zip(values) {
            if e.value.shape() != v.shape() {
                return Err(shape_err("restore", &e.value, &v));
            }
            e.value = v;
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, w: W) -> std::io::Result<()> {
        let file = CheckpointFile {
            magic: CHECKPOINT_MAGIC.to_string(),
            version: CHECKPOINT_VERSION,
            params: self
                .entries
                .iter()
                .map(|e| CheckpointEntry {
                    name: e.name.clone(),
                    shape: [e.value.rows, e.value.cols],
                    values: e.value.data.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(w, &file).map_err(std::io::Error::from)
    }

    /// Load values into an already-shaped store; names and shapes must agree.
    pub fn read_checkpoint<R: Read>(&mut self, r: R) -> Result<()> {
        let file: CheckpointFile = serde_json::from_reader(r)
            .map_err(|e| TensorError::Invalid(format!("checkpoint: {e}")))?;
        if file.magic != CHECKPOINT_MAGIC {
            return Err(TensorError::Invalid(format!(
                "checkpoint: bad magic `{}`",
                file.magic
            )));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(TensorError::Invalid(format!(
                "checkpoint: unsupported version {}",
                file.version
            )));
        }
        if file.params.len() != self.entries.len() {
            return Err(TensorError::Invalid(format!(
                "checkpoint: {} parameters, model expects {}",
                file.params.len(),
                self.entries.len()
            )));
        }
        for p in file.params {
            let id = self
                .id(&p.name)
                .ok_or_else(|| TensorError::Invalid(format!("checkpoint: unknown `{}`", p.name)))?;
            let value = Matrix::from_vec(p.shape[0], p.shape[1], p.values)?;
            let entry = &mut self.entries[id.0];
            if entry.value.shape() != value.shape() {
                return Err(shape_err("checkpoint", &entry.value, &value));
            }
            entry.value = value;
        }
        Ok(())
    }
}
