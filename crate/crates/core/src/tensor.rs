//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its value and a record of its parents; [`Graph::backward`]
//! walks the tape from the loss back to the first node, so every node is
//! visited once in reverse construction order.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("degenerate row in {op}: row {row} has no valid entries")]
    DegenerateRow { op: &'static str, row: usize },
    #[error("label {gold} out of range for {classes} classes")]
    Label { gold: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Dimension {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::Dimension {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let cols = self.last_dim();
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let cols = self.last_dim().max(1);
        self.data.chunks(cols).map(<[f64]>::to_vec).collect()
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Scale(Var, f64),
    MeanAxis { input: Var, axis: usize },
    MaxAxis { input: Var, argmax: Vec<usize> },
    Sum(Var),
    SumSquares(Var),
    SoftmaxMasked { input: Var, valid: Vec<bool> },
    CrossEntropy { input: Var, gold: usize, probs: Vec<f64> },
    MaskRows { input: Var, keep: Vec<bool> },
    SliceRows { input: Var, start: usize },
    SliceLast { input: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Stack(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation tape.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient; zeros when `v` was not reached by any backward pass.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape.clone();
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.value(a).dims2("matmul")?;
        let (q2, r) = self.value(b).dims2("matmul")?;
        if q != q2 {
            return Err(TensorError::Dimension {
                op: "matmul",
                lhs: vec![p, q],
                rhs: vec![q2, r],
            });
        }
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            let orow = &mut out[i * r..(i + 1) * r];
            for k in 0..q {
                let aik = av[i * q + k];
                let brow = &bv[k * r..(k + 1) * r];
                for (o, bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        let value = Tensor {
            shape: vec![p, r],
            data: out,
        };
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("transpose")?;
        let av = &self.value(a).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let value = Tensor {
            shape: vec![c, r],
            data: out,
        };
        Ok(self.derived(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if shape.iter().product::<usize>() != src.numel() {
            return Err(TensorError::Dimension {
                op: "reshape",
                lhs: src.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: src.data.clone(),
        };
        Ok(self.derived(value, Op::Reshape(a), &[a]))
    }

    /// Concatenates along the last axis; all leading dimensions must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TensorError::Dimension {
                op: "concat_last",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (p, q) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = p + q;
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let rows = av.len() / p.max(1);
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for i in 0..rows {
            out.extend_from_slice(&av[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv[i * q..(i + 1) * q]);
        }
        Ok(self.derived(Tensor { shape, data: out }, Op::Concat(a, b), &[a, b]))
    }

    /// `b` broadcasts over `a` when its shape is a suffix of `a`'s shape.
    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let bv = &self.value(b).data;
        let mut value = self.value(a).clone();
        let block = bv.len();
        for chunk in value.data.chunks_mut(block) {
            for (x, y) in chunk.iter_mut().zip(bv) {
                *x += y;
            }
        }
        Ok(self.derived(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let bv = &self.value(b).data;
        let mut value = self.value(a).clone();
        let block = bv.len();
        for chunk in value.data.chunks_mut(block) {
            for (x, y) in chunk.iter_mut().zip(bv) {
                *x *= y;
            }
        }
        Ok(self.derived(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|x| *x = x.tanh());
        self.derived(value, Op::Tanh(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|x| *x *= c);
        self.derived(value, Op::Scale(a, c), &[a])
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let shape = self.shape(a);
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::Dimension {
                op,
                lhs: shape.to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    /// Mean over `axis`. Each slice is summed in ascending order, so the result
    /// is bit-identical under any permutation along `axis`, and a length-one
    /// axis reproduces its input exactly.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", a, axis)?;
        let src = self.value(a);
        let (outer, len, inner) = axis_extents(&src.shape, axis);
        let mut out = vec![0.0; outer * inner];
        let mut slice = Vec::with_capacity(len);
        for o in 0..outer {
            for i in 0..inner {
                slice.clear();
                slice.extend((0..len).map(|k| src.data[(o * len + k) * inner + i]));
                slice.sort_by(f64::total_cmp);
                let acc = slice[1..].iter().fold(slice[0], |acc, x| acc + x);
                out[o * inner + i] = acc / len as f64;
            }
        }
        let mut shape = src.shape.clone();
        shape.remove(axis);
        Ok(self.derived(
            Tensor { shape, data: out },
            Op::MeanAxis { input: a, axis },
            &[a],
        ))
    }

    /// Max over `axis`; ties resolve to the lowest index, which also receives
    /// the whole gradient.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_axis", a, axis)?;
        let src = self.value(a);
        let (outer, len, inner) = axis_extents(&src.shape, axis);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = src.data[o * len * inner + i];
                for k in 1..len {
                    let v = src.data[(o * len + k) * inner + i];
                    if v > best_v {
                        best = k;
                        best_v = v;
                    }
                }
                out[o * inner + i] = best_v;
                argmax[o * inner + i] = (o * len + best) * inner + i;
            }
        }
        let mut shape = src.shape.clone();
        shape.remove(axis);
        Ok(self.derived(
            Tensor { shape, data: out },
            Op::MaxAxis { input: a, argmax },
            &[a],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        self.derived(Tensor::scalar(s), Op::SumSquares(a), &[a])
    }

    /// Softmax over the last axis restricted to `valid` positions; invalid
    /// positions are left out of the normalizer and come out as exact zeros.
    pub fn softmax_masked(&mut self, a: Var, valid: &[bool]) -> Result<Var> {
        let src = self.value(a);
        let n = src.last_dim();
        if src.rank() == 0 || valid.len() != n {
            return Err(TensorError::Dimension {
                op: "softmax_masked",
                lhs: src.shape.clone(),
                rhs: vec![valid.len()],
            });
        }
        let mut out = vec![0.0; src.numel()];
        for (row, (x, y)) in src.data.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            softmax_row(x, valid, y).ok_or(TensorError::DegenerateRow {
                op: "softmax_masked",
                row,
            })?;
        }
        let value = Tensor {
            shape: src.shape.clone(),
            data: out,
        };
        let op = Op::SoftmaxMasked {
            input: a,
            valid: valid.to_vec(),
        };
        Ok(self.derived(value, op, &[a]))
    }

    /// Softmax over the last axis with every position valid.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let valid = vec![true; self.value(a).last_dim()];
        self.softmax_masked(a, &valid)
    }

    /// `-log softmax(logits)[gold]` for a logit vector.
    pub fn cross_entropy_logits(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let src = self.value(logits);
        if src.rank() != 1 || src.numel() < 2 {
            return Err(TensorError::Dimension {
                op: "cross_entropy_logits",
                lhs: src.shape.clone(),
                rhs: vec![],
            });
        }
        let c = src.numel();
        if gold >= c {
            return Err(TensorError::Label { gold, classes: c });
        }
        let max = src.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = src.data.iter().map(|x| (x - max).exp()).sum();
        let log_z = max + sum.ln();
        let loss = log_z - src.data[gold];
        let probs = src.data.iter().map(|x| (x - log_z).exp()).collect();
        let op = Op::CrossEntropy {
            input: logits,
            gold,
            probs,
        };
        Ok(self.derived(Tensor::scalar(loss), op, &[logits]))
    }

    /// Zeroes every row `i` of a matrix where `keep[i]` is false.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let (r, c) = self.value(a).dims2("mask_rows")?;
        if keep.len() != r {
            return Err(TensorError::Dimension {
                op: "mask_rows",
                lhs: vec![r, c],
                rhs: vec![keep.len()],
            });
        }
        let mut value = self.value(a).clone();
        for (row, &k) in value.data.chunks_mut(c.max(1)).zip(keep) {
            if !k {
                row.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let op = Op::MaskRows {
            input: a,
            keep: keep.to_vec(),
        };
        Ok(self.derived(value, op, &[a]))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2("slice_rows")?;
        if start + len > r || len == 0 {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                len: r,
            });
        }
        let data = self.value(a).data[start * c..(start + len) * c].to_vec();
        let value = Tensor {
            shape: vec![len, c],
            data,
        };
        Ok(self.derived(value, Op::SliceRows { input: a, start }, &[a]))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let rows = self.slice_rows(a, i, 1)?;
        let c = self.shape(rows)[1];
        self.reshape(rows, &[c])
    }

    /// Positions `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        let n = src.last_dim();
        if src.rank() == 0 || start + len > n || len == 0 {
            return Err(TensorError::Index {
                op: "slice_last",
                index: start + len,
                len: n,
            });
        }
        let mut shape = src.shape.clone();
        *shape.last_mut().unwrap() = len;
        let data = src
            .data
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.derived(
            Tensor { shape, data },
            Op::SliceLast { input: a, start },
            &[a],
        ))
    }

    /// Embedding lookup: stacks `table[ids[k]]` into a `len(ids) × d` matrix.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.value(table).dims2("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: id,
                    len: r,
                });
            }
            data.extend_from_slice(&self.value(table).data[id * c..(id + 1) * c]);
        }
        let value = Tensor {
            shape: vec![ids.len(), c],
            data,
        };
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.derived(value, op, &[table]))
    }

    /// Stacks same-shape tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Dimension {
            op: "stack",
            lhs: vec![],
            rhs: vec![],
        })?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(TensorError::Dimension {
                    op: "stack",
                    lhs: inner,
                    rhs: self.shape(p).to_vec(),
                });
            }
            data.extend_from_slice(&self.value(p).data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        Ok(self.derived(Tensor { shape, data }, Op::Stack(parts.to_vec()), parts))
    }

    /// `x · Wᵀ + b` for `x` of shape `[.., in]` (vector or matrix) and `W` of
    /// shape `[out, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let wt = self.transpose(weight)?;
        let y = match xs.as_slice() {
            [d] => {
                let row = self.reshape(x, &[1, *d])?;
                let y = self.matmul(row, wt)?;
                let out = self.shape(y)[1];
                self.reshape(y, &[out])?
            }
            _ => self.matmul(x, wt)?,
        };
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            match &mut self.grads[idx] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.clone()),
            }
            self.propagate(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (p, q) = (av.shape[0], av.shape[1]);
                let r = bv.shape[1];
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; p * q];
                    for i in 0..p {
                        let grow = &g[i * r..(i + 1) * r];
                        for k in 0..q {
                            let brow = &bv.data[k * r..(k + 1) * r];
                            da[i * q + k] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    send(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; q * r];
                    for i in 0..p {
                        let grow = &g[i * r..(i + 1) * r];
                        for k in 0..q {
                            let aik = av.data[i * q + k];
                            let drow = &mut db[k * r..(k + 1) * r];
                            for (d, gij) in drow.iter_mut().zip(grow) {
                                *d += aik * gij;
                            }
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape[0], node.value.shape[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = g[i * c + j];
                    }
                }
                send(*a, da);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Concat(a, b) => {
                let p = self.nodes[a.0].value.last_dim();
                let q = self.nodes[b.0].value.last_dim();
                let rows = g.len() / (p + q);
                let mut da = Vec::with_capacity(rows * p);
                let mut db = Vec::with_capacity(rows * q);
                for row in g.chunks(p + q) {
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                send(*a, da);
                send(*b, db);
            }
            Op::Add(a, b) => {
                let block = self.nodes[b.0].value.numel();
                let mut db = vec![0.0; block];
                for chunk in g.chunks(block) {
                    db.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                }
                send(*a, g.to_vec());
                send(*b, db);
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                let block = bv.len();
                let mut da = vec![0.0; g.len()];
                let mut db = vec![0.0; block];
                for (k, (gc, ac)) in g.chunks(block).zip(av.chunks(block)).enumerate() {
                    for j in 0..block {
                        da[k * block + j] = gc[j] * bv[j];
                        db[j] += gc[j] * ac[j];
                    }
                }
                send(*a, da);
                send(*b, db);
            }
            Op::Tanh(a) => {
                let da = g
                    .iter()
                    .zip(&node.value.data)
                    .map(|(gi, y)| gi * (1.0 - y * y))
                    .collect();
                send(*a, da);
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|x| x * c).collect()),
            Op::MeanAxis { input, axis } => {
                let shape = &self.nodes[input.0].value.shape;
                let (outer, len, inner) = axis_extents(shape, *axis);
                let mut da = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            da[(o * len + k) * inner + i] = g[o * inner + i] / len as f64;
                        }
                    }
                }
                send(*input, da);
            }
            Op::MaxAxis { input, argmax } => {
                let mut da = vec![0.0; self.nodes[input.0].value.numel()];
                for (gi, &pos) in g.iter().zip(argmax) {
                    da[pos] += gi;
                }
                send(*input, da);
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.nodes[a.0].value.numel()]),
            Op::SumSquares(a) => {
                let da = self.nodes[a.0]
                    .value
                    .data
                    .iter()
                    .map(|x| 2.0 * x * g[0])
                    .collect();
                send(*a, da);
            }
            Op::SoftmaxMasked { input, valid } => {
                let n = valid.len();
                let mut da = vec![0.0; g.len()];
                for ((y, gr), dr) in node.value.data.chunks(n).zip(g.chunks(n)).zip(da.chunks_mut(n)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        if valid[j] {
                            dr[j] = y[j] * (gr[j] - dot);
                        }
                    }
                }
                send(*input, da);
            }
            Op::CrossEntropy { input, gold, probs } => {
                let mut da: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                da[*gold] -= g[0];
                send(*input, da);
            }
            Op::MaskRows { input, keep } => {
                let c = node.value.last_dim();
                let mut da = g.to_vec();
                for (row, &k) in da.chunks_mut(c.max(1)).zip(keep) {
                    if !k {
                        row.iter_mut().for_each(|x| *x = 0.0);
                    }
                }
                send(*input, da);
            }
            Op::SliceRows { input, start } => {
                let c = node.value.last_dim();
                let mut da = vec![0.0; self.nodes[input.0].value.numel()];
                da[start * c..start * c + g.len()].copy_from_slice(g);
                send(*input, da);
            }
            Op::SliceLast { input, start } => {
                let src = &self.nodes[input.0].value;
                let n = src.last_dim();
                let len = node.value.last_dim();
                let mut da = vec![0.0; src.numel()];
                for (drow, grow) in da.chunks_mut(n).zip(g.chunks(len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                send(*input, da);
            }
            Op::GatherRows { table, ids } => {
                let c = node.value.last_dim();
                let mut da = vec![0.0; self.nodes[table.0].value.numel()];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        da[id * c + j] += g[k * c + j];
                    }
                }
                send(*table, da);
            }
            Op::Stack(parts) => {
                let block = g.len() / parts.len();
                for (p, chunk) in parts.iter().zip(g.chunks(block)) {
                    send(*p, chunk.to_vec());
                }
            }
        }
    }
}

/// Writes a masked softmax of `x` into `y`. Returns `None` when no position is valid.
fn softmax_row(x: &[f64], valid: &[bool], y: &mut [f64]) -> Option<()> {
    let max = x
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(x, _)| *x)
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))?;
    let mut sum = 0.0;
    for j in 0..x.len() {
        if valid[j] {
            y[j] = (x[j] - max).exp();
            sum += y[j];
        } else {
            y[j] = 0.0;
        }
    }
    y.iter_mut().for_each(|v| *v /= sum);
    Some(())
}

/// Plain masked softmax over a slice, outside any graph.
pub fn softmax_values(x: &[f64], valid: &[bool]) -> Option<Vec<f64>> {
    let mut y = vec![0.0; x.len()];
    softmax_row(x, valid, &mut y)?;
    Some(y)
}
