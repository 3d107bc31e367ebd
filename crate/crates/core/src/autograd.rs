//! Dense-tensor reverse-mode differentiation on a per-step tape, plus the
//! Adam optimizer and inverted dropout.
//!
//! Tensors are row-major 2-D `f64` matrices owned by a [`Tape`]. Every
//! operation whose inputs require gradients is recorded; [`Tensor::backward`]
//! walks the tape once in reverse. Learned weights live in [`Parameter`]s
//! outside any tape and are spliced in per step with [`Tape::param`];
//! [`Tape::flush_param_grads`] copies accumulated node gradients back out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("shape mismatch: ({0}, {1}) vs ({2}, {3})")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("loss must be a 1x1 scalar, got ({0}, {1})")]
    NonScalarLoss(usize, usize),
    #[error("tensor is detached: no gradient path to any input")]
    DetachedTensor,
    #[error("dropout rate must satisfy 0 <= rate < 1, got {0}")]
    InvalidRate(f64),
    #[error("index {0} out of range ({1} rows)")]
    IndexOutOfRange(usize, usize),
}

type Result<T> = std::result::Result<T, AutogradError>;

#[derive(Debug, Clone)]
// Some op payloads (the affine offset, the padded row count) only shape the
// forward values and are not read again during backward.
#[allow(dead_code)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, f64, f64),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize, usize),
    PadRows(usize, usize),
    GatherRows(usize, Vec<usize>),
    Sigmoid(usize),
    Tanh(usize),
    RowSoftmax(usize),
    MeanRows(usize),
    CrossEntropy(usize, usize),
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

struct TapeInner {
    nodes: Vec<Node>,
    // (node index, parameter) pairs spliced in via `param`
    params: Vec<(usize, Parameter)>,
}

/// Recording tape for one forward/backward step.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    idx: usize,
}

/// A learned weight array living outside any tape.
#[derive(Clone)]
pub struct Parameter {
    inner: Rc<RefCell<ParamInner>>,
}

struct ParamInner {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Vec<f64>,
}

impl Parameter {
    pub fn new(name: &str, rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(rows * cols, values.len(), "parameter size mismatch");
        let grad = vec![0.0; values.len()];
        Parameter {
            inner: Rc::new(RefCell::new(ParamInner {
                name: name.to_string(),
                rows,
                cols,
                values,
                grad,
            })),
        }
    }

    pub fn zeros(name: &str, rows: usize, cols: usize) -> Self {
        Self::new(name, rows, cols, vec![0.0; rows * cols])
    }

    /// N(0, 1) entries scaled by `scale`, fully determined by `rng` state.
    pub fn randn(name: &str, rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let values = (0..rows * cols)
            .map(|_| standard_normal(rng) * scale)
            .collect();
        Self::new(name, rows, cols, values)
    }

    pub fn name(&self) -> String {
        self.inner.borrow().name.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        let p = self.inner.borrow();
        (p.rows, p.cols)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    pub fn grad(&self) -> Vec<f64> {
        self.inner.borrow().grad.clone()
    }

    pub fn set_values(&self, values: &[f64]) {
        let mut p = self.inner.borrow_mut();
        assert_eq!(p.values.len(), values.len());
        p.values.copy_from_slice(values);
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Nudge a single entry; used by finite-difference checks.
    pub fn perturb(&self, i: usize, delta: f64) {
        self.inner.borrow_mut().values[i] += delta;
    }
}

/// Box–Muller draw. Two uniforms per call keeps the stream simple and
/// platform-independent.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                params: Vec::new(),
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, rows: usize, cols: usize, values: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(rows * cols, values.len());
        let grad = if requires_grad { vec![0.0; values.len()] } else { Vec::new() };
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            rows,
            cols,
            values,
            grad,
            requires_grad,
            op,
        });
        Tensor {
            tape: self.clone(),
            idx: inner.nodes.len() - 1,
        }
    }

    /// Constant input; not differentiated.
    pub fn constant(&self, rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
        self.push(rows, cols, values, false, Op::Leaf)
    }

    /// Differentiable leaf not tied to a [`Parameter`].
    pub fn leaf(&self, rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
        self.push(rows, cols, values, true, Op::Leaf)
    }

    /// Splice a parameter onto the tape. Its gradient is delivered by
    /// [`Tape::flush_param_grads`] after backward.
    pub fn param(&self, p: &Parameter) -> Tensor {
        let (rows, cols) = p.shape();
        let t = self.push(rows, cols, p.values(), true, Op::Leaf);
        self.inner.borrow_mut().params.push((t.idx, p.clone()));
        t
    }

    /// Add each spliced parameter's node gradient into the parameter's own
    /// accumulator. Call exactly once per backward pass.
    pub fn flush_param_grads(&self) {
        let inner = self.inner.borrow();
        for (idx, p) in &inner.params {
            let node = &inner.nodes[*idx];
            let mut pi = p.inner.borrow_mut();
            for (g, ng) in pi.grad.iter_mut().zip(node.grad.iter()) {
                *g += *ng;
            }
        }
    }
}

impl Tensor {
    pub fn shape(&self) -> (usize, usize) {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.idx];
        (n.rows, n.cols)
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.idx].values.clone()
    }

    pub fn grad(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.idx].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.idx].requires_grad
    }

    /// Scalar extraction; panics if not 1x1.
    pub fn item(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.idx];
        assert_eq!((n.rows, n.cols), (1, 1), "item() on non-scalar");
        n.values[0]
    }

    fn with<R>(&self, f: impl FnOnce(&Node) -> R) -> R {
        let inner = self.tape.inner.borrow();
        f(&inner.nodes[self.idx])
    }

    fn binary_shapes(&self, other: &Tensor) -> (usize, usize, usize, usize) {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.idx];
        let b = &inner.nodes[other.idx];
        (a.rows, a.cols, b.rows, b.cols)
    }

    fn requires(&self, other: Option<&Tensor>) -> bool {
        let inner = self.tape.inner.borrow();
        inner.nodes[self.idx].requires_grad
            || other.map_or(false, |o| inner.nodes[o.idx].requires_grad)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, k2, n) = self.binary_shapes(other);
        if k != k2 {
            return Err(AutogradError::ShapeMismatch(m, k, k2, n));
        }
        let req = self.requires(Some(other));
        let values = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].values;
            let b = &inner.nodes[other.idx].values;
            matmul_raw(a, b, m, k, n)
        };
        Ok(self
            .tape
            .push(m, n, values, req, Op::MatMul(self.idx, other.idx)))
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = self.shape();
        let values = self.with(|node| {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = node.values[i * n + j];
                }
            }
            out
        });
        self.tape
            .push(n, m, values, self.requires(None), Op::Transpose(self.idx))
    }

    /// Elementwise addition; `other` may be a 1-row bias broadcast over rows.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (m, n, bm, bn) = self.binary_shapes(other);
        if !((bm == m && bn == n) || (bm == 1 && bn == n)) {
            return Err(AutogradError::ShapeMismatch(m, n, bm, bn));
        }
        let req = self.requires(Some(other));
        let values = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].values;
            let b = &inner.nodes[other.idx].values;
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    let bv = if bm == 1 { b[j] } else { b[i * n + j] };
                    out.push(a[i * n + j] + bv);
                }
            }
            out
        };
        Ok(self
            .tape
            .push(m, n, values, req, Op::Add(self.idx, other.idx)))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (m, n, bm, bn) = self.binary_shapes(other);
        if bm != m || bn != n {
            return Err(AutogradError::ShapeMismatch(m, n, bm, bn));
        }
        let req = self.requires(Some(other));
        let values = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].values;
            let b = &inner.nodes[other.idx].values;
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        Ok(self
            .tape
            .push(m, n, values, req, Op::Sub(self.idx, other.idx)))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, n, bm, bn) = self.binary_shapes(other);
        if bm != m || bn != n {
            return Err(AutogradError::ShapeMismatch(m, n, bm, bn));
        }
        let req = self.requires(Some(other));
        let values = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].values;
            let b = &inner.nodes[other.idx].values;
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        Ok(self
            .tape
            .push(m, n, values, req, Op::Mul(self.idx, other.idx)))
    }

    /// `x * mul + add`, elementwise.
    pub fn affine(&self, mul: f64, add: f64) -> Tensor {
        let (m, n) = self.shape();
        let values = self.with(|node| node.values.iter().map(|v| v * mul + add).collect());
        self.tape
            .push(m, n, values, self.requires(None), Op::Affine(self.idx, mul, add))
    }

    pub fn sigmoid(&self) -> Tensor {
        let (m, n) = self.shape();
        let values = self.with(|node| {
            node.values
                .iter()
                .map(|v| 1.0 / (1.0 + (-v).exp()))
                .collect()
        });
        self.tape
            .push(m, n, values, self.requires(None), Op::Sigmoid(self.idx))
    }

    pub fn tanh(&self) -> Tensor {
        let (m, n) = self.shape();
        let values = self.with(|node| node.values.iter().map(|v| v.tanh()).collect());
        self.tape
            .push(m, n, values, self.requires(None), Op::Tanh(self.idx))
    }

    /// Numerically stable softmax over each row; rows sum to 1.
    pub fn row_softmax(&self) -> Tensor {
        let (m, n) = self.shape();
        let values = self.with(|node| {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &node.values[i * n..(i + 1) * n];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[i * n + j] /= sum;
                }
            }
            out
        });
        self.tape
            .push(m, n, values, self.requires(None), Op::RowSoftmax(self.idx))
    }

    /// Mean over rows: `[m x n] -> [1 x n]`.
    pub fn mean_rows(&self) -> Tensor {
        let (m, n) = self.shape();
        let values = self.with(|node| {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += node.values[i * n + j];
                }
            }
            out.iter_mut().for_each(|v| *v /= m as f64);
            out
        });
        self.tape
            .push(1, n, values, self.requires(None), Op::MeanRows(self.idx))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape.clone();
        let m = parts[0].rows();
        let mut total = 0;
        for p in parts {
            let (pm, pn) = p.shape();
            if pm != m {
                return Err(AutogradError::ShapeMismatch(m, total, pm, pn));
            }
            total += pn;
        }
        let req = parts.iter().any(|p| p.requires_grad());
        let values = {
            let inner = tape.inner.borrow();
            let mut out = Vec::with_capacity(m * total);
            for i in 0..m {
                for p in parts {
                    let node = &inner.nodes[p.idx];
                    out.extend_from_slice(&node.values[i * node.cols..(i + 1) * node.cols]);
                }
            }
            out
        };
        let idxs = parts.iter().map(|p| p.idx).collect();
        Ok(tape.push(m, total, values, req, Op::ConcatCols(idxs)))
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape.clone();
        let n = parts[0].cols();
        let mut total = 0;
        for p in parts {
            let (pm, pn) = p.shape();
            if pn != n {
                return Err(AutogradError::ShapeMismatch(total, n, pm, pn));
            }
            total += pm;
        }
        let req = parts.iter().any(|p| p.requires_grad());
        let values = {
            let inner = tape.inner.borrow();
            let mut out = Vec::with_capacity(total * n);
            for p in parts {
                out.extend_from_slice(&inner.nodes[p.idx].values);
            }
            out
        };
        let idxs = parts.iter().map(|p| p.idx).collect();
        Ok(tape.push(total, n, values, req, Op::ConcatRows(idxs)))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.shape();
        if start >= end || end > m {
            return Err(AutogradError::IndexOutOfRange(end, m));
        }
        let values = self.with(|node| node.values[start * n..end * n].to_vec());
        Ok(self.tape.push(
            end - start,
            n,
            values,
            self.requires(None),
            Op::SliceRows(self.idx, start, end),
        ))
    }

    /// Zero-pad with extra rows up to `total_rows`.
    pub fn pad_rows(&self, total_rows: usize) -> Result<Tensor> {
        let (m, n) = self.shape();
        if total_rows < m {
            return Err(AutogradError::IndexOutOfRange(total_rows, m));
        }
        let values = self.with(|node| {
            let mut out = node.values.clone();
            out.resize(total_rows * n, 0.0);
            out
        });
        Ok(self.tape.push(
            total_rows,
            n,
            values,
            self.requires(None),
            Op::PadRows(self.idx, total_rows),
        ))
    }

    /// Row gather: output row i = input row `indices[i]`. The adjoint
    /// scatter-adds, so repeated indices accumulate.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (m, n) = self.shape();
        for &i in indices {
            if i >= m {
                return Err(AutogradError::IndexOutOfRange(i, m));
            }
        }
        let values = self.with(|node| {
            let mut out = Vec::with_capacity(indices.len() * n);
            for &i in indices {
                out.extend_from_slice(&node.values[i * n..(i + 1) * n]);
            }
            out
        });
        Ok(self.tape.push(
            indices.len(),
            n,
            values,
            self.requires(None),
            Op::GatherRows(self.idx, indices.to_vec()),
        ))
    }

    /// `-log p[target]` for a `[1 x C]` probability row.
    pub fn cross_entropy(&self, target: usize) -> Result<Tensor> {
        let (m, n) = self.shape();
        if m != 1 || target >= n {
            return Err(AutogradError::IndexOutOfRange(target, n));
        }
        let values = self.with(|node| vec![-node.values[target].max(1e-300).ln()]);
        Ok(self.tape.push(
            1,
            1,
            values,
            self.requires(None),
            Op::CrossEntropy(self.idx, target),
        ))
    }

    /// Reverse pass from this scalar. Node gradients accumulate across
    /// repeated calls; parameter gradients are delivered separately by
    /// [`Tape::flush_param_grads`].
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.idx];
            if (n.rows, n.cols) != (1, 1) {
                return Err(AutogradError::NonScalarLoss(n.rows, n.cols));
            }
            if !n.requires_grad {
                return Err(AutogradError::DetachedTensor);
            }
        }
        // Each pass runs in fresh adjoint buffers and is then added into the
        // persistent node grads, so repeated calls accumulate.
        let mut inner = self.tape.inner.borrow_mut();
        let mut adj: Vec<Vec<f64>> = inner
            .nodes
            .iter()
            .map(|n| if n.requires_grad { vec![0.0; n.values.len()] } else { Vec::new() })
            .collect();
        adj[self.idx][0] = 1.0;
        for idx in (0..=self.idx).rev() {
            backprop_node(&inner.nodes, &mut adj, idx);
        }
        for (node, a) in inner.nodes.iter_mut().zip(adj.iter()) {
            if node.requires_grad {
                add_into(&mut node.grad, a);
            }
        }
        Ok(())
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn backprop_node(nodes: &[Node], adj: &mut [Vec<f64>], idx: usize) {
    if !nodes[idx].requires_grad {
        return;
    }
    let op = nodes[idx].op.clone();
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, n) = (nodes[idx].rows, nodes[idx].cols);
            let k = nodes[a].cols;
            let dc = std::mem::take(&mut adj[idx]);
            if nodes[a].requires_grad {
                // dA += dC . B^T
                let bv = &nodes[b].values;
                let da = &mut adj[a];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += dc[i * n + j] * bv[p * n + j];
                        }
                        da[i * k + p] += s;
                    }
                }
            }
            if nodes[b].requires_grad {
                // dB += A^T . dC
                let av = &nodes[a].values;
                let db = &mut adj[b];
                for i in 0..m {
                    for p in 0..k {
                        let a_ip = av[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += a_ip * dc[i * n + j];
                        }
                    }
                }
            }
            adj[idx] = dc;
        }
        Op::Transpose(a) => {
            if nodes[a].requires_grad {
                let (m, n) = (nodes[idx].rows, nodes[idx].cols);
                let dc = std::mem::take(&mut adj[idx]);
                for i in 0..m {
                    for j in 0..n {
                        adj[a][j * m + i] += dc[i * n + j];
                    }
                }
                adj[idx] = dc;
            }
        }
        Op::Add(a, b) => {
            let (m, n) = (nodes[idx].rows, nodes[idx].cols);
            let dc = std::mem::take(&mut adj[idx]);
            if nodes[a].requires_grad {
                add_into(&mut adj[a], &dc);
            }
            if nodes[b].requires_grad {
                if nodes[b].rows == 1 && m > 1 {
                    for i in 0..m {
                        for j in 0..n {
                            adj[b][j] += dc[i * n + j];
                        }
                    }
                } else {
                    add_into(&mut adj[b], &dc);
                }
            }
            adj[idx] = dc;
        }
        Op::Sub(a, b) => {
            let dc = std::mem::take(&mut adj[idx]);
            if nodes[a].requires_grad {
                add_into(&mut adj[a], &dc);
            }
            if nodes[b].requires_grad {
                for (g, d) in adj[b].iter_mut().zip(dc.iter()) {
                    *g -= d;
                }
            }
            adj[idx] = dc;
        }
        Op::Mul(a, b) => {
            let dc = std::mem::take(&mut adj[idx]);
            if nodes[a].requires_grad {
                for ((g, d), v) in adj[a].iter_mut().zip(dc.iter()).zip(nodes[b].values.iter()) {
                    *g += d * v;
                }
            }
            if nodes[b].requires_grad {
                for ((g, d), v) in adj[b].iter_mut().zip(dc.iter()).zip(nodes[a].values.iter()) {
                    *g += d * v;
                }
            }
            adj[idx] = dc;
        }
        Op::Affine(a, mul, _) => {
            if nodes[a].requires_grad {
                let dc = std::mem::take(&mut adj[idx]);
                for (g, d) in adj[a].iter_mut().zip(dc.iter()) {
                    *g += d * mul;
                }
                adj[idx] = dc;
            }
        }
        Op::ConcatCols(parts) => {
            let m = nodes[idx].rows;
            let n_total = nodes[idx].cols;
            let dc = std::mem::take(&mut adj[idx]);
            let mut offset = 0;
            for p in parts {
                let pn = nodes[p].cols;
                if nodes[p].requires_grad {
                    for i in 0..m {
                        for j in 0..pn {
                            adj[p][i * pn + j] += dc[i * n_total + offset + j];
                        }
                    }
                }
                offset += pn;
            }
            adj[idx] = dc;
        }
        Op::ConcatRows(parts) => {
            let n = nodes[idx].cols;
            let dc = std::mem::take(&mut adj[idx]);
            let mut offset = 0;
            for p in parts {
                let pm = nodes[p].rows;
                if nodes[p].requires_grad {
                    for i in 0..pm * n {
                        adj[p][i] += dc[offset * n + i];
                    }
                }
                offset += pm;
            }
            adj[idx] = dc;
        }
        Op::SliceRows(a, start, _end) => {
            if nodes[a].requires_grad {
                let n = nodes[idx].cols;
                let rows = nodes[idx].rows;
                let dc = std::mem::take(&mut adj[idx]);
                for i in 0..rows * n {
                    adj[a][start * n + i] += dc[i];
                }
                adj[idx] = dc;
            }
        }
        Op::PadRows(a, _) => {
            if nodes[a].requires_grad {
                let len = nodes[a].values.len();
                let dc = std::mem::take(&mut adj[idx]);
                for i in 0..len {
                    adj[a][i] += dc[i];
                }
                adj[idx] = dc;
            }
        }
        Op::GatherRows(a, indices) => {
            if nodes[a].requires_grad {
                let n = nodes[idx].cols;
                let dc = std::mem::take(&mut adj[idx]);
                for (row, &src) in indices.iter().enumerate() {
                    for j in 0..n {
                        adj[a][src * n + j] += dc[row * n + j];
                    }
                }
                adj[idx] = dc;
            }
        }
        Op::Sigmoid(a) => {
            if nodes[a].requires_grad {
                let dc = std::mem::take(&mut adj[idx]);
                for ((g, d), v) in adj[a].iter_mut().zip(dc.iter()).zip(nodes[idx].values.iter()) {
                    *g += d * v * (1.0 - v);
                }
                adj[idx] = dc;
            }
        }
        Op::Tanh(a) => {
            if nodes[a].requires_grad {
                let dc = std::mem::take(&mut adj[idx]);
                for ((g, d), v) in adj[a].iter_mut().zip(dc.iter()).zip(nodes[idx].values.iter()) {
                    *g += d * (1.0 - v * v);
                }
                adj[idx] = dc;
            }
        }
        Op::RowSoftmax(a) => {
            if nodes[a].requires_grad {
                let (m, n) = (nodes[idx].rows, nodes[idx].cols);
                let y = &nodes[idx].values;
                let dc = std::mem::take(&mut adj[idx]);
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += dc[i * n + j] * y[i * n + j];
                    }
                    for j in 0..n {
                        adj[a][i * n + j] += y[i * n + j] * (dc[i * n + j] - dot);
                    }
                }
                adj[idx] = dc;
            }
        }
        Op::MeanRows(a) => {
            if nodes[a].requires_grad {
                let m = nodes[a].rows;
                let n = nodes[idx].cols;
                let dc = std::mem::take(&mut adj[idx]);
                for i in 0..m {
                    for j in 0..n {
                        adj[a][i * n + j] += dc[j] / m as f64;
                    }
                }
                adj[idx] = dc;
            }
        }
        Op::CrossEntropy(a, target) => {
            if nodes[a].requires_grad {
                let d = adj[idx][0];
                let p = nodes[a].values[target].max(1e-300);
                adj[a][target] += -d / p;
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += *s;
    }
}

/// Inverted dropout: in training, each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)`; in eval it is identity.
/// The mask is fully determined by `seed`.
pub fn apply_dropout(x: &Tensor, rate: f64, training: bool, seed: u64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(AutogradError::InvalidRate(rate));
    }
    if !training || rate == 0.0 {
        return Ok(x.affine(1.0, 0.0));
    }
    let (m, n) = x.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..m * n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
        .collect();
    let mask_t = x.tape.constant(m, n, mask);
    x.mul(&mask_t)
}

/// Bias-corrected Adam over a fixed parameter list. Moment slots are keyed
/// by position, so the list must be identical across steps.
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    slots: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            slots: Vec::new(),
        }
    }
}

/// One Adam update from each parameter's accumulated gradient. Gradients
/// are zeroed afterwards.
pub fn adam_step(params: &[Parameter], state: &mut AdamState) -> Result<()> {
    if state.slots.is_empty() {
        state.slots = params
            .iter()
            .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
            .collect();
    }
    if state.slots.len() != params.len() {
        return Err(AutogradError::ShapeMismatch(state.slots.len(), 0, params.len(), 0));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (p, (m, v)) in params.iter().zip(state.slots.iter_mut()) {
        if p.len() != m.len() {
            let (r, c) = p.shape();
            return Err(AutogradError::ShapeMismatch(r, c, m.len(), 1));
        }
        let mut pi = p.inner.borrow_mut();
        for i in 0..pi.values.len() {
            let g = pi.grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            pi.values[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        pi.grad.iter_mut().for_each(|g| *g = 0.0);
    }
    Ok(())
}

/// Central finite difference of a scalar function at `x`. Forward-only, so
/// it is independent of the tape's backward pass.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut xs = x.to_vec();
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}
