//! Dense `f64` tensors and a tape-based reverse-mode differentiation engine.
//!
//! Every value on a [`Tape`] is a row-major matrix (`rows × cols`); scalars
//! are `1 × 1` and vectors are `1 × n`. There is no implicit broadcasting:
//! the only mixed-shape operations are the explicit [`Tape::add_bias`] and the
//! scalar forms [`Tape::scale`] / [`Tape::add_scalar`].
//!
//! Nodes are appended in execution order, so walking the node list backwards
//! is a valid topological order and each node's adjoint is propagated once.
//! `-inf` is allowed as a masking sentinel (causal attention, disallowed
//! output classes); NaN and `+inf` are rejected with `NonFiniteValue`.

use std::borrow::Cow;

use crate::error::{Error, Result};

/// N-dimensional dense array with optional gradient storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || n != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { op: "tensor" });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Unchecked constructor for engine outputs that may carry `-inf` masks.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    /// Shape seen by the tape: first dimension by the product of the rest.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    CausalMask(Var),
    MaskColumns(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        scale: Var,
        offset: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding(Var, Vec<u32>),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    MinScalar(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Record of executed operations; values of leaves may borrow from tensors.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    consumed: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        Err(Error::NonFiniteValue { op })
    } else {
        Ok(())
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(rows, cols, value, op, needs_grad))
    }

    /// Borrows a tensor as a leaf; gradients flow to it iff `requires_grad`.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        let (rows, cols) = t.matrix_dims();
        self.nodes.push(Node {
            rows,
            cols,
            value: Cow::Borrowed(&t.data),
            op: Op::Leaf,
            needs_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrows a tensor as a leaf that never receives a gradient.
    pub fn leaf_frozen(&mut self, t: &'a Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].needs_grad = false;
        v
    }

    /// Owned leaf; `requires_grad` controls whether it gets an adjoint.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::shape("input", &[rows, cols], &[data.len()]));
        }
        self.push_checked("input", rows, cols, data, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.input(rows, cols, data, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("matmul", m, n, out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", &[m, k], &[n, k2]));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("matmul_nt", m, n, out, Op::MatMulNt(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(n, m, out, Op::Transpose(a), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, &[da.0, da.1], &[db.0, db.1]));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("add", r, c, out, Op::Add(a, b), ng)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("mul", r, c, out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let (r, k) = self.dims(a);
        let out = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.ng(a);
        self.push_checked("scale", r, k, out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let (r, k) = self.dims(a);
        let out = self.value(a).iter().map(|x| x + c).collect();
        let ng = self.ng(a);
        self.push_checked("add_scalar", r, k, out, Op::AddScalar(a), ng)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(bias) != (1, c) {
            let (br, bc) = self.dims(bias);
            return Err(Error::shape("add_bias", &[r, c], &[br, bc]));
        }
        let bv = self.value(bias);
        let out = self
            .value(a)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(bv).map(|(x, b)| x + b))
            .collect();
        let ng = self.ng(a) || self.ng(bias);
        self.push_checked("add_bias", r, c, out, Op::AddBias(a, bias), ng)
    }

    /// Max-shifted softmax over each row.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push_checked("row_softmax", r, c, out, Op::RowSoftmax(a), ng)
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(a);
        self.push_checked("row_log_softmax", r, c, out, Op::RowLogSoftmax(a), ng)
    }

    /// Sets entries above the diagonal of a square matrix to `-inf`.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r != c {
            return Err(Error::shape("causal_mask", &[r, c], &[r, r]));
        }
        let mut out = self.value(a).to_vec();
        for i in 0..r {
            for j in i + 1..c {
                out[i * c + j] = f64::NEG_INFINITY;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::CausalMask(a), ng))
    }

    /// Sets the listed columns of every row to `-inf`.
    pub fn mask_columns(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::shape("mask_columns", &[r, c], &[bad]));
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            for &j in cols {
                row[j] = f64::NEG_INFINITY;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::MaskColumns(a, cols.to_vec()), ng))
    }

    /// Row-wise layer normalization with learned `1 × cols` scale and offset.
    pub fn layer_norm(&mut self, x: Var, scale: Var, offset: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        for p in [scale, offset] {
            if self.dims(p) != (1, c) {
                let (pr, pc) = self.dims(p);
                return Err(Error::shape("layer_norm", &[r, c], &[pr, pc]));
            }
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(scale), self.value(offset));
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.ng(x) || self.ng(scale) || self.ng(offset);
        self.push_checked(
            "layer_norm",
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                scale,
                offset,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::shape("embedding", &[v, d], &[0]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::TargetOutOfRange {
                target: bad as usize,
                vocab: v,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i as usize * d..(i as usize + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(ids.len(), d, out, Op::Embedding(table, ids.to_vec()), ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.ng(a);
        self.push_checked("relu", r, c, out, Op::Relu(a), ng)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let ng = self.ng(a);
        self.push_checked("gelu", r, c, out, Op::Gelu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        let ng = self.ng(a);
        self.push_checked("exp", r, c, out, Op::Exp(a), ng)
    }

    /// Elementwise `min(a, c)`; the adjoint passes only where `a < c`.
    pub fn min_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let (r, k) = self.dims(a);
        let out = self.value(a).iter().map(|&x| if x < c { x } else { c }).collect();
        let ng = self.ng(a);
        self.push_checked("min_scalar", r, k, out, Op::MinScalar(a, c), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", &[], &[]));
        };
        let rows = self.dims(first).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::shape("concat_cols", &[rows], &[r, c]));
            }
            cols += c;
        }
        let mut out = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.dims(p);
            let pv = self.value(p);
            for i in 0..rows {
                out[i * cols + off..i * cols + off + c].copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, end]));
        }
        let w = end - start;
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + end]);
        }
        let ng = self.ng(a);
        Ok(self.push(r, w, out, Op::SliceCols(a, start), ng))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", &[r, c], &[start, end]));
        }
        let out = self.value(a)[start * c..end * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(end - start, c, out, Op::SliceRows(a, start), ng))
    }

    /// Sum of all entries, in index order.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum::<f64>();
        let ng = self.ng(a);
        self.push_checked("sum", 1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push_checked("mean", 1, 1, vec![s], Op::Mean(a), ng)
    }

    /// Summed negative log-likelihood of `targets` under row-softmax of
    /// `logits`, over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r || mask.len() != r {
            return Err(Error::shape("cross_entropy", &[r, c], &[targets.len(), mask.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
            return Err(Error::TargetOutOfRange {
                target: bad as usize,
                vocab: c,
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            let row = &lv[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            loss += lse - row[targets[i] as usize];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let ng = self.ng(logits);
        self.push_checked(
            "cross_entropy",
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Replays the tape in reverse from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar(vec![r, c]));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            // keep the adjoint for inspection of intermediate nodes
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if let Some(da) = self.acc(grads, *a) {
                    let bv = self.value(*b);
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] += dot(gr, &bv[p * n..(p + 1) * n]);
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    let av = self.value(*a);
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            axpy(av[i * k + p], gr, &mut db[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if let Some(da) = self.acc(grads, *a) {
                    let bv = self.value(*b);
                    for i in 0..m {
                        for j in 0..n {
                            axpy(g[i * n + j], &bv[j * k..(j + 1) * k], &mut da[i * k..(i + 1) * k]);
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    let av = self.value(*a);
                    for i in 0..m {
                        for j in 0..n {
                            axpy(g[i * n + j], &av[i * k..(i + 1) * k], &mut db[j * k..(j + 1) * k]);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    // node is rows × cols, input is cols × rows
                    for i in 0..rows {
                        for j in 0..cols {
                            da[j * rows + i] += g[i * cols + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    let bv = self.value(*b);
                    for (i, x) in da.iter_mut().enumerate() {
                        *x += g[i] * bv[i];
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    let av = self.value(*a);
                    for (i, x) in db.iter_mut().enumerate() {
                        *x += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddScalar(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::AddBias(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(db) = self.acc(grads, *b) {
                    for row in g.chunks_exact(cols) {
                        db.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::RowSoftmax(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    let y = &node.value;
                    for i in 0..rows {
                        let (yr, gr) = (&y[i * cols..(i + 1) * cols], &g[i * cols..(i + 1) * cols]);
                        let s = dot(yr, gr);
                        for j in 0..cols {
                            da[i * cols + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::RowLogSoftmax(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    let y = &node.value;
                    for i in 0..rows {
                        let gr = &g[i * cols..(i + 1) * cols];
                        let s: f64 = gr.iter().sum();
                        for j in 0..cols {
                            da[i * cols + j] += gr[j] - y[i * cols + j].exp() * s;
                        }
                    }
                }
            }
            Op::CausalMask(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..rows {
                        for j in 0..=i {
                            da[i * cols + j] += g[i * cols + j];
                        }
                    }
                }
            }
            Op::MaskColumns(a, masked) => {
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..rows {
                        for j in 0..cols {
                            if !masked.contains(&j) {
                                da[i * cols + j] += g[i * cols + j];
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                scale,
                offset,
                xhat,
                rstd,
            } => {
                let gv = self.value(*scale);
                if let Some(dx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; cols];
                    for i in 0..rows {
                        let gr = &g[i * cols..(i + 1) * cols];
                        let hr = &xhat[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dot(&dxhat, hr) / cols as f64;
                        for j in 0..cols {
                            dx[i * cols + j] += rstd[i] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if let Some(ds) = self.acc(grads, *scale) {
                    for i in 0..rows {
                        for j in 0..cols {
                            ds[j] += g[i * cols + j] * xhat[i * cols + j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *offset) {
                    for row in g.chunks_exact(cols) {
                        db.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Embedding(table, ids) => {
                if let Some(dt) = self.acc(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        let dst = &mut dt[id * cols..(id + 1) * cols];
                        dst.iter_mut()
                            .zip(&g[i * cols..(i + 1) * cols])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    let av = self.value(*a);
                    for i in 0..da.len() {
                        if av[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    let av = self.value(*a);
                    for i in 0..da.len() {
                        let x = av[i];
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                        da[i] += g[i] * d;
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    let y = &node.value;
                    for i in 0..da.len() {
                        da[i] += g[i] * y[i];
                    }
                }
            }
            Op::MinScalar(a, c) => {
                if let Some(da) = self.acc(grads, *a) {
                    let av = self.value(*a);
                    for i in 0..da.len() {
                        if av[i] < *c {
                            da[i] += g[i];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    if let Some(dp) = self.acc(grads, p) {
                        for i in 0..rows {
                            let src = &g[i * cols + off..i * cols + off + c];
                            dp[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let in_cols = self.dims(*a).1;
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..rows {
                        let dst = &mut da[i * in_cols + start..i * in_cols + start + cols];
                        dst.iter_mut()
                            .zip(&g[i * cols..(i + 1) * cols])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if let Some(da) = self.acc(grads, *a) {
                    da[start * cols..(start + rows) * cols]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    let s = g[0] / da.len() as f64;
                    da.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let c = self.dims(*logits).1;
                if let Some(dl) = self.acc(grads, *logits) {
                    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..c {
                            dl[i * c + j] += g[0] * probs[i * c + j];
                        }
                        dl[i * c + t as usize] -= g[0];
                    }
                }
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if it was never reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`; zeros (of length `len`) when `v` is off the loss path.
    pub fn take_or_zeros(&mut self, v: Var, len: usize) -> Vec<f64> {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| vec![0.0; len])
    }

    /// Accumulates the gradient of `v` into `t.grad` (zeros if unreached).
    pub fn write_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.numel()]),
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

/// `out += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

/// Moment accumulators for [`adam_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over a list of parameter buffers.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            &[params.len()],
            &[grads.len(), state.m.len()],
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::shape("adam_step", &[p.len()], &[g.len()]));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub passed: bool,
}

/// Relative error with a floor on the denominator so that pairs of tiny
/// gradients are compared in absolute terms.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-3))
}

/// Compares the tape gradient of a scalar function of `x` with central
/// differences of step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let (rows, cols) = x.matrix_dims();
    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.input(rows, cols, data, false)?;
        let out = f(&mut tape, xv)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let xv = tape.input(rows, cols, x.data().to_vec(), true)?;
    let out = f(&mut tape, xv)?;
    let mut grads = tape.backward(out)?;
    let analytic = grads.take_or_zeros(xv, x.numel());

    let mut numeric = vec![0.0; x.numel()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        *slot = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        passed: max_rel_error < tol,
    })
}

/// Outcome of [`param_grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheckReport {
    pub max_rel_error: f64,
    /// (buffer, element) of the worst disagreement.
    pub worst: (usize, usize),
    pub checked: usize,
    pub passed: bool,
}

/// Central-difference check of `analytic` against `loss` over every element
/// of every parameter buffer.
pub fn param_grad_check<F>(
    values: &[Vec<f64>],
    analytic: &[Vec<f64>],
    h: f64,
    tol: f64,
    loss: F,
) -> Result<ParamCheckReport>
where
    F: Fn(&[Vec<f64>]) -> Result<f64>,
{
    if values.len() != analytic.len() {
        return Err(Error::shape("param_grad_check", &[values.len()], &[analytic.len()]));
    }
    let mut work = values.to_vec();
    let mut report = ParamCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
        passed: true,
    };
    for (ti, grads) in analytic.iter().enumerate() {
        if grads.len() != values[ti].len() {
            return Err(Error::shape("param_grad_check", &[values[ti].len()], &[grads.len()]));
        }
        for k in 0..grads.len() {
            let orig = work[ti][k];
            work[ti][k] = orig + h;
            let plus = loss(&work)?;
            work[ti][k] = orig - h;
            let minus = loss(&work)?;
            work[ti][k] = orig;
            let e = relative_error(grads[k], (plus - minus) / (2.0 * h));
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = (ti, k);
            }
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn softmax_of(v: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(1, v.len(), v.to_vec()).unwrap();
        let y = tape.row_softmax(x).unwrap();
        tape.value(y).to_vec()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_of(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(softmax_of(&[1000.0, 1000.0]), vec![0.5, 0.5]);
        let p = softmax_of(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tensor_rejects_bad_shape_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(Error::NonFiniteValue { .. })
        ));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = tape.constant(2, 3, vec![0.0; 6]).unwrap();
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = tape.constant(3, 2, vec![0.0; 6]).unwrap();
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn nan_is_detected() {
        let mut tape = Tape::new();
        let a = tape.constant(1, 1, vec![800.0]).unwrap();
        assert!(matches!(tape.exp(a), Err(Error::NonFiniteValue { op: "exp" })));
        let z = tape.constant(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(tape.causal_mask(z).is_err(), "non-square causal mask");
    }

    #[test]
    fn cross_entropy_examples() {
        let v = 23;
        let mut logits = vec![0.0; v];
        logits[0] = f64::NEG_INFINITY;
        logits[1] = f64::NEG_INFINITY;
        let mut tape = Tape::new();
        let l = tape.input(1, v, vec![0.0; v], false).unwrap();
        let l = tape.mask_columns(l, &[0, 1]).unwrap();
        let ce = tape.cross_entropy(l, &[7], &[true]).unwrap();
        assert!((tape.scalar(ce) - 21f64.ln()).abs() < 1e-12);
        assert!((21f64.ln() - 3.04452).abs() < 1e-5);

        let mut peaked = vec![-1e4; v];
        peaked[5] = 0.0;
        let mut tape = Tape::new();
        let l = tape.input(1, v, peaked, false).unwrap();
        let ce = tape.cross_entropy(l, &[5], &[true]).unwrap();
        assert_eq!(tape.scalar(ce), 0.0);

        let mut tape = Tape::new();
        let row: Vec<f64> = (0..v).map(|i| (i as f64 * 0.37).sin()).collect();
        let one = tape.input(1, v, row.clone(), false).unwrap();
        let ce1 = tape.cross_entropy(one, &[4], &[true]).unwrap();
        let two = tape.input(3, v, [row.clone(), row.clone(), row].concat(), false).unwrap();
        let ce2 = tape.cross_entropy(two, &[4, 4, 9], &[true, true, false]).unwrap();
        assert_eq!(tape.scalar(ce2), 2.0 * tape.scalar(ce1));

        assert!(matches!(
            tape.cross_entropy(one, &[23], &[true]),
            Err(Error::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_simple_cases() {
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.5]).unwrap().with_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let s = tape.sum(xv).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(xv).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        let expected: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(xv).unwrap(), expected.as_slice());
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let a = tape.input(1, 2, vec![1.0, 2.0], true).unwrap();
        assert!(matches!(tape.backward(a), Err(Error::NotScalar(_))));
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn off_path_tensors_get_zero_grad() {
        let mut a = Tensor::full(&[2], 1.0).with_grad();
        let mut b = Tensor::full(&[2], 2.0).with_grad();
        let grads = {
            let mut tape = Tape::new();
            let av = tape.leaf(&a);
            let _bv = tape.leaf(&b);
            let s = tape.sum(av).unwrap();
            (tape.backward(s).unwrap(), av, _bv)
        };
        grads.0.write_into(grads.1, &mut a).unwrap();
        grads.0.write_into(grads.2, &mut b).unwrap();
        assert_eq!(a.grad.as_deref(), Some(&[1.0, 1.0][..]));
        assert_eq!(b.grad.as_deref(), Some(&[0.0, 0.0][..]));
    }

    /// f(x) = sum(tanh-free 2-layer net) built from the public primitive set.
    fn two_layer(tape: &mut Tape<'_>, x: Var, w1: &Tensor, w2: &Tensor) -> Result<Var> {
        let w1 = tape.constant(w1.shape()[0], w1.shape()[1], w1.data().to_vec())?;
        let w2 = tape.constant(w2.shape()[0], w2.shape()[1], w2.data().to_vec())?;
        let h = tape.matmul(x, w1)?;
        let h = tape.gelu(h)?;
        let o = tape.matmul(h, w2)?;
        let p = tape.row_softmax(o)?;
        let sq = tape.mul(p, o)?;
        tape.sum(sq)
    }

    #[test]
    fn random_two_layer_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let x = rand_tensor(&mut rng, &[3, 4]);
            let w1 = rand_tensor(&mut rng, &[4, 5]);
            let w2 = rand_tensor(&mut rng, &[5, 3]);
            let rep = grad_check(|t, xv| two_layer(t, xv, &w1, &w2), &x, 1e-3, 1e-4).unwrap();
            assert!(rep.passed, "max rel err {}", rep.max_rel_error);
        }
    }

    #[test]
    fn grad_check_sum_is_exact_up_to_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[4, 4]);
        let rep = grad_check(|t, xv| t.sum(xv), &x, 1e-3, 1e-4).unwrap();
        assert!(rep.max_rel_error < 1e-10);
        assert!(rep.passed);
    }

    #[test]
    fn grad_check_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[4, 23], |_| rng.random_range(-3.0..3.0));
        let rep = grad_check(
            |t, xv| {
                let m = t.mask_columns(xv, &[0, 1])?;
                t.cross_entropy(m, &[3, 2, 22, 9], &[true, true, false, true])
            },
            &x,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "max rel err {}", rep.max_rel_error);
    }

    #[test]
    fn grad_check_flags_wrong_adjoint() {
        // exp(x) reported through a path whose adjoint ignores the 0.5 factor:
        // the value uses scale(0.5) on a constant copy, the gradient path does not.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 2]);
        let rep = grad_check(
            |t, xv| {
                let frozen = t.constant(2, 2, t.value(xv).to_vec())?;
                let half = t.scale(frozen, -0.5)?;
                let y = t.add(xv, half)?; // value 0.5x, adjoint 1
                let e = t.exp(y)?;
                t.sum(e)
            },
            &x,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(!rep.passed);
    }

    #[test]
    fn every_primitive_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 4]);
        let bias = rand_tensor(&mut rng, &[1, 4]);
        let gam = Tensor::from_fn(&[1, 4], |_| rng.random_range(0.5..1.5));
        type Build = Box<dyn Fn(&mut Tape<'_>, Var) -> Result<Var>>;
        let wd = w.data().to_vec();
        let bd = bias.data().to_vec();
        let gd = gam.data().to_vec();
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", Box::new(move |t, x| { let w = t.constant(4, 4, wd.clone())?; let y = t.matmul(x, w)?; let y = t.mul(y, y)?; t.sum(y) })),
            ("matmul_nt", Box::new(|t, x| { let y = t.matmul_nt(x, x)?; let y = t.mul(y, y)?; t.mean(y) })),
            ("transpose", Box::new(|t, x| { let y = t.transpose(x)?; let y = t.matmul(x, y)?; let y = t.exp(y)?; t.sum(y) })),
            ("add_bias", Box::new(move |t, x| { let b = t.constant(1, 4, bd.clone())?; let y = t.add_bias(x, b)?; let y = t.mul(y, y)?; t.sum(y) })),
            ("layer_norm", Box::new(move |t, x| {
                let g = t.constant(1, 4, gd.clone())?;
                let b = t.constant(1, 4, vec![0.1, -0.2, 0.3, 0.0])?;
                let y = t.layer_norm(x, g, b)?;
                let w = t.constant(3, 4, (0..12).map(|i| (i as f64).cos()).collect())?;
                let y = t.mul(y, w)?;
                t.sum(y)
            })),
            ("causal_softmax", Box::new(|t, x| {
                let s = t.matmul_nt(x, x)?;
                let s = t.causal_mask(s)?;
                let p = t.row_softmax(s)?;
                let o = t.matmul(p, x)?;
                let o = t.mul(o, o)?;
                t.sum(o)
            })),
            ("log_softmax", Box::new(|t, x| { let y = t.row_log_softmax(x)?; let p = t.exp(y)?; let e = t.mul(p, y)?; t.sum(e) })),
            ("relu", Box::new(|t, x| { let y = t.add_scalar(x, 0.05)?; let y = t.relu(y)?; let y = t.mul(y, y)?; t.sum(y) })),
            ("concat_slice", Box::new(|t, x| {
                let a = t.slice_cols(x, 0, 2)?;
                let b = t.slice_cols(x, 2, 4)?;
                let b = t.scale(b, 3.0)?;
                let c = t.concat_cols(&[b, a])?;
                let r = t.slice_rows(c, 1, 3)?;
                let r = t.mul(r, r)?;
                t.sum(r)
            })),
            ("min_scalar", Box::new(|t, x| { let y = t.exp(x)?; let y = t.min_scalar(y, 1.3)?; let y = t.mul(y, y)?; t.sum(y) })),
        ];
        for (name, f) in cases {
            let rep = grad_check(|t, v| f(t, v), &x, 1e-3, 1e-4).unwrap();
            assert!(rep.passed, "{name}: max rel err {} at {}", rep.max_rel_error, rep.worst_index);
        }
    }

    #[test]
    fn shared_subexpression_sums_path_contributions() {
        // y = x∘x used twice vs. two independently built copies
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[2, 3]).with_grad();
        let shared = {
            let mut t = Tape::new();
            let xv = t.leaf(&x);
            let y = t.mul(xv, xv).unwrap();
            let a = t.exp(y).unwrap();
            let b = t.scale(y, 3.0).unwrap();
            let s = t.add(a, b).unwrap();
            let s = t.sum(s).unwrap();
            t.backward(s).unwrap().get(xv).unwrap().to_vec()
        };
        let duplicated = {
            let mut t = Tape::new();
            let xv = t.leaf(&x);
            let y1 = t.mul(xv, xv).unwrap();
            let y2 = t.mul(xv, xv).unwrap();
            let a = t.exp(y1).unwrap();
            let b = t.scale(y2, 3.0).unwrap();
            let s = t.add(a, b).unwrap();
            let s = t.sum(s).unwrap();
            t.backward(s).unwrap().get(xv).unwrap().to_vec()
        };
        for (a, b) in shared.iter().zip(&duplicated) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new([2]);
        adam_step(&mut [&mut p], &[vec![0.0, 0.0]], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_constant_grad_steps_at_lr() {
        // With constant g, bias-corrected m̂ = g and v̂ = g², so every step is
        // lr·g/(|g|+eps) ≈ lr·sign(g).
        let cfg = AdamConfig::with_lr(0.01);
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new([2]);
        let g = vec![0.3, -2.0];
        let mut prev = p.clone();
        for _ in 0..500 {
            adam_step(&mut [&mut p], &[g.clone()], &mut st, &cfg).unwrap();
            let step: Vec<f64> = p.iter().zip(&prev).map(|(a, b)| a - b).collect();
            assert!((step[0] + 0.01).abs() < 1e-9);
            assert!((step[1] - 0.01).abs() < 1e-9);
            prev = p.clone();
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![0.5; 4];
            let mut st = AdamState::new([4]);
            for k in 0..50 {
                let g: Vec<f64> = (0..4).map(|i| ((i * 7 + k) as f64).sin()).collect();
                adam_step(&mut [&mut p], &[g], &mut st, &AdamConfig::default()).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = vec![0.0; 3];
        let mut st = AdamState::new([3]);
        assert!(adam_step(&mut [&mut p], &[vec![0.0; 2]], &mut st, &AdamConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized_and_shift_invariant(
            row in prop::collection::vec(-50.0f64..50.0, 1..30),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax_of(&row);
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
            let q = softmax_of(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
