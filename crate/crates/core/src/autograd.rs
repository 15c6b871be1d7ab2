//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every trainable component in the crate builds its forward pass on a
//! [`Graph`]: parameters are bound lazily from a [`ParamStore`], operations
//! compute their value eagerly, and [`Graph::backward`] walks the tape in
//! reverse to produce per-parameter gradients.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self::from_vec(1, cols, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
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

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, a) in a_row.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Named trainable tensors. Values are reference counted so snapshots are
/// cheap; updates copy on write. Versions are unique across all stores, so
/// two stores report the same version only if one is an unmodified clone of
/// the other.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Matrix>>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(Arc::new(value));
        self.version = next_version();
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_arc(&self, id: ParamId) -> Arc<Matrix> {
        Arc::clone(&self.values[id.0])
    }

    /// Mutable access bumps the store version so derived caches can detect
    /// stale values.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        self.version = next_version();
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "parameter {} shape change",
            self.names[id.0]
        );
        self.version = next_version();
        self.values[id.0] = Arc::new(value);
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v.as_ref()))
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy(Var, usize),
}

struct Node {
    op: Op,
    value: Arc<Matrix>,
}

/// Gradients produced by [`Graph::backward`], keyed by parameter.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_param: HashMap<ParamId, Matrix>,
    by_var: HashMap<usize, Matrix>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.by_param.get(&id)
    }

    /// Gradient with respect to a non-parameter leaf created by
    /// [`Graph::input`].
    pub fn input(&self, var: Var) -> Option<&Matrix> {
        self.by_var.get(&var.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.values().all(Matrix::is_finite)
    }
}

/// Computation graph bound to one parameter snapshot.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    /// A differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A non-differentiable constant (gradients are still accumulated but
    /// never reported).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let value = self.store.get_arc(id);
        self.nodes.push(Node {
            op: Op::Param(id),
            value,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(Op::MatMulT(a, b), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(Op::Add(a, b), value)
    }

    /// Adds the `1 × n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, cols) = self.shape(a);
        assert_eq!(self.shape(row), (1, cols), "add_row shape mismatch");
        let mut value = self.value(a).clone();
        let r = self.value(row).data.clone();
        for chunk in value.data.chunks_mut(cols) {
            for (x, b) in chunk.iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(Op::AddRow(a, row), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        let value = Matrix::from_vec(av.rows, av.cols, data);
        self.push(Op::Sub(a, b), value)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(av.rows, av.cols, data);
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for r in 0..value.rows {
            softmax_in_place(value.row_mut(r));
        }
        self.push(Op::SoftmaxRows(a), value)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    /// Selects rows of `a` by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * av.cols);
        for &i in idx {
            assert!(i < av.rows, "gather index {i} out of range {}", av.rows);
            data.extend_from_slice(av.row(i));
        }
        let value = Matrix::from_vec(idx.len(), av.cols, data);
        self.push(Op::Gather(a, idx.to_vec()), value)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        let value = Matrix::from_vec(rows, cols, data);
        self.push(Op::ConcatRows(parts.to_vec()), value)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.data[r * cols + offset..r * cols + offset + v.cols]
                    .copy_from_slice(v.row(r));
            }
            offset += v.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), value)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows, "slice_rows out of range");
        let value = Matrix::from_vec(
            len,
            av.cols,
            av.data[start * av.cols..(start + len) * av.cols].to_vec(),
        );
        self.push(Op::SliceRows(a, start), value)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(av.rows * len);
        for r in 0..av.rows {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let value = Matrix::from_vec(av.rows, len, data);
        self.push(Op::SliceCols(a, start), value)
    }

    /// Column-wise mean over rows, producing a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert!(av.rows > 0, "mean of zero rows");
        let mut out = vec![0.0; av.cols];
        for r in 0..av.rows {
            for (o, x) in out.iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let n = av.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        self.push(Op::MeanRows(a), Matrix::row_vector(out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Op::Sum(a), Matrix::from_vec(1, 1, vec![s]))
    }

    /// Softmax cross-entropy of a `1 × n` logit row against class `gold`.
    pub fn cross_entropy(&mut self, logits: Var, gold: usize) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, 1, "cross_entropy expects a single row");
        assert!(gold < lv.cols, "gold index out of range");
        let loss = softmax_cross_entropy(&lv.data, gold);
        self.push(
            Op::CrossEntropy(logits, gold),
            Matrix::from_vec(1, 1, vec![loss]),
        )
    }

    /// Adds a list of scalar nodes.
    pub fn add_scalars(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = self.add(acc, *t);
        }
        acc
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));
        let mut out = Gradients::default();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    out.by_var.insert(idx, g);
                }
                Op::Param(id) => {
                    out.by_param.insert(*id, g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = vec![0.0; g.cols];
                    for r in 0..g.rows {
                        for (o, x) in gr.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *row, Matrix::row_vector(gr));
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = elementwise(&g, bv, |x, y| x * y);
                    let gb = elementwise(&g, av, |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => {
                    accumulate(&mut grads, *a, g.map(|x| x * f));
                }
                Op::Tanh(a) => {
                    let ga = elementwise(&g, &node.value, |x, y| x * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = elementwise(&g, &node.value, |x, y| x * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner = dot(yr, gr);
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose());
                }
                Op::Gather(a, idx_list) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    for (k, &i) in idx_list.iter().enumerate() {
                        for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let (rows, cols) = self.shape(*p);
                        let part = Matrix::from_vec(
                            rows,
                            cols,
                            g.data[start * cols..(start + rows) * cols].to_vec(),
                        );
                        accumulate(&mut grads, *p, part);
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = self.shape(*p);
                        let mut part = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            part.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        accumulate(&mut grads, *p, part);
                        offset += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    ga.data[start * cols..start * cols + g.data.len()].copy_from_slice(&g.data);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let n = rows as f64;
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        for (o, x) in ga.row_mut(r).iter_mut().zip(&g.data) {
                            *o = x / n;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    accumulate(&mut grads, *a, Matrix::filled(rows, cols, g.data[0]));
                }
                Op::CrossEntropy(a, gold) => {
                    let mut p = self.value(*a).data.clone();
                    softmax_in_place(&mut p);
                    p[*gold] -= 1.0;
                    let scale = g.data[0];
                    p.iter_mut().for_each(|x| *x *= scale);
                    accumulate(&mut grads, *a, Matrix::row_vector(p));
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
    Matrix::from_vec(a.rows, a.cols, data)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place max-subtracted softmax.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// `-log softmax(logits)[gold]`, evaluated as `logsumexp(logits) - logits[gold]`.
pub fn softmax_cross_entropy(logits: &[f64], gold: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    lse - logits[gold]
}

pub mod gradcheck {
    //! Central finite-difference gradient checker.

    use super::*;

    pub const REL_TOL: f64 = 1e-4;

    /// Compares autodiff gradients of `loss` with central differences on up to
    /// `per_tensor` entries of every parameter in `ids`. Returns the worst
    /// relative error observed; callers compare it against [`REL_TOL`].
    pub fn check_params(
        store: &ParamStore,
        ids: &[ParamId],
        per_tensor: usize,
        loss: impl Fn(&mut Graph<'_>) -> Var,
    ) -> f64 {
        let grads = {
            let mut g = Graph::new(store);
            let root = loss(&mut g);
            g.backward(root)
        };
        let mut worst: f64 = 0.0;
        for &id in ids {
            let value = store.get(id).clone();
            let n = value.data().len();
            let step = (n / per_tensor.max(1)).max(1);
            let analytic = grads.param(id).cloned().unwrap_or_else(|| {
                Matrix::zeros(value.rows(), value.cols())
            });
            for i in (0..n).step_by(step).take(per_tensor) {
                let fd = central_difference(store, id, i, &loss);
                let ad = analytic.data()[i];
                let err = relative_error(fd, ad);
                worst = if err.is_nan() || worst.is_nan() { f64::NAN } else { worst.max(err) };
            }
        }
        worst
    }

    pub fn central_difference(
        store: &ParamStore,
        id: ParamId,
        i: usize,
        loss: &impl Fn(&mut Graph<'_>) -> Var,
    ) -> f64 {
        let x = store.get(id).data()[i];
        let h = 1e-4 * x.abs().max(1.0);
        let eval = |delta: f64| {
            let mut s = store.clone();
            s.get_mut(id).data_mut()[i] = x + delta;
            let mut g = Graph::new(&s);
            let root = loss(&mut g);
            g.scalar(root)
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    }

    /// Relative error with an absolute floor so exactly-zero gradients compare
    /// cleanly.
    pub fn relative_error(a: f64, b: f64) -> f64 {
        let diff = (a - b).abs();
        diff / a.abs().max(b.abs()).max(1e-6)
    }
}
