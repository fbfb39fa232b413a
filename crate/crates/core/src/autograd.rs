//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value. Because nodes
//! are only ever appended, tape order is a topological order and the backward
//! sweep simply walks the tape from the loss towards the front, visiting each
//! node once. Gradient accumulation order is therefore fixed by tape order and
//! repeated runs are bit-identical.
//!
//! Parameters live in a [`ParamStore`] outside the tape. The first use of a
//! parameter on a tape copies it into a leaf node; later uses reuse that leaf.
//! Parameters whose group is not trainable enter the tape as constants, so no
//! gradient is ever computed for them.

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
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
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddN(Vec<Var>),
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    LogSoftmaxRows(Var),
    Sigmoid(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Clip {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Mse(Var, Var),
    Mae(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    RowSums(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    GatherElems {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    trainable: Vec<bool>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape with no parameter store; inputs enter through [`Tape::leaf`].
    pub fn new() -> Self {
        Tape {
            store: None,
            trainable: Vec::new(),
            param_vars: Vec::new(),
            nodes: Vec::new(),
        }
    }

    /// A tape where every parameter in `store` is trainable.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Self::with_trainable(store, |_| true)
    }

    /// A tape where only parameters whose group passes `trainable` get gradients.
    pub fn with_trainable(store: &'p ParamStore, trainable: impl Fn(ParamGroup) -> bool) -> Self {
        let mask = store.iter().map(|(_, p)| trainable(p.group)).collect();
        Tape {
            store: Some(store),
            trainable: mask,
            param_vars: vec![None; store.len()],
            nodes: Vec::new(),
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` with no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Leaf node for a stored parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let value = store.value(id).clone();
        let v = self.leaf(value, self.trainable[id.0]);
        self.param_vars[id.0] = Some(v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        tensor::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        tensor::gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var) -> Result<usize> {
        let n = self.value(a).cols();
        if self.value(row).len() != n {
            return Err(Error::dim(op, self.shape(a), self.shape(row)));
        }
        Ok(n)
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.row_broadcast("add_row", a, row)?;
        let r = self.value(row).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a` elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.row_broadcast("mul_row", a, row)?;
        let r = self.value(row).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o *= b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    /// `1 - a`, computed exactly as `(-1)·a + 1`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Sum of equally shaped nodes, accumulated left to right.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or(Error::InvalidArgument {
            op: "add_n",
            reason: "no inputs".into(),
        })?;
        let mut out = self.value(first).clone();
        for &v in &vars[1..] {
            if self.shape(v) != out.shape() {
                return Err(Error::dim("add_n", out.shape(), self.shape(v)));
            }
            for (o, x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += x;
            }
        }
        let rg = self.rg(vars);
        Ok(self.push(out, Op::AddN(vars.to_vec()), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), tensor::sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), tensor::gelu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::InvalidArgument {
                op: "ln",
                reason: "non-positive input".into(),
            });
        }
        Ok(self.map(a, Op::Ln(a), f64::ln))
    }

    /// Elementwise clamp; the gradient is zero where the input lies outside `[lo, hi]`.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument {
                op: "clip",
                reason: format!("lo {lo} > hi {hi}"),
            });
        }
        Ok(self.map(a, Op::Clip { x: a, lo, hi }, |x| x.clamp(lo, hi)))
    }

    // ---- normalizations -------------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len().max(1) {
            return Err(Error::InvalidArgument {
                op: "softmax",
                reason: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, axis_len, inner) = if shape.is_empty() {
            (1, 1, 1)
        } else {
            (
                shape[..axis].iter().product(),
                shape[axis],
                shape[axis + 1..].iter().product(),
            )
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * axis_len * inner + k * inner + i;
                let max = (0..axis_len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..axis_len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..axis_len {
                    out[at(k)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
            rg,
        ))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.cols();
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&r| (r - max).exp()).sum::<f64>().ln();
            for r in row.iter_mut() {
                *r -= lse;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmaxRows(x), rg)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let n = v.cols();
        let mut out = v.clone();
        let mut rstds = Vec::with_capacity(v.rows());
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for r in row.iter_mut() {
                *r = (*r - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LayerNorm { x, rstd: rstds }, rg)
    }

    /// Row-wise ℓ2 normalization. Fails on a zero row.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = v.cols();
        let mut out = v.clone();
        let mut norms = Vec::with_capacity(v.rows());
        for (i, row) in out.data_mut().chunks_mut(n).enumerate() {
            let norm = tensor::dot(row, row).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm {
                    op: "normalize_rows",
                    row: i,
                });
            }
            for r in row.iter_mut() {
                *r /= norm;
            }
            norms.push(norm);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, rg))
    }

    // ---- reductions -----------------------------------------------------

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s: f64 = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(s / va.len() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mse(a, b), rg))
    }

    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mae", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s: f64 = va.iter().zip(vb).map(|(x, y)| (x - y).abs()).sum();
        let out = Tensor::scalar(s / va.len() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mae(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over rows: `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::row_vector(out), Op::MeanRows(a), rg)
    }

    /// Sum within each row: `[m×n] -> [m×1]`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.rows();
        let out: Vec<f64> = (0..m).map(|i| v.row(i).iter().sum()).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![m, 1], out).expect("m rows"), Op::RowSums(a), rg)
    }

    // ---- structural -----------------------------------------------------

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (m, n) = (v.rows(), v.cols());
        if len == 0 || start + len > n {
            return Err(Error::InvalidArgument {
                op: "slice_cols",
                reason: format!("columns {start}..{} of {n}", start + len),
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        let m = vars
            .first()
            .map(|&v| self.value(v).rows())
            .ok_or(Error::InvalidArgument {
                op: "concat_cols",
                reason: "no inputs".into(),
            })?;
        for &v in vars {
            if self.value(v).rows() != m {
                return Err(Error::dim("concat_cols", self.shape(vars[0]), self.shape(v)));
            }
        }
        let n: usize = vars.iter().map(|&v| self.value(v).cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &v in vars {
                out.extend_from_slice(self.value(v).row(i));
            }
        }
        let rg = self.rg(vars);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(vars.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Result<Var> {
        let n = vars
            .first()
            .map(|&v| self.value(v).cols())
            .ok_or(Error::InvalidArgument {
                op: "concat_rows",
                reason: "no inputs".into(),
            })?;
        let mut out = Vec::new();
        let mut m = 0;
        for &v in vars {
            let val = self.value(v);
            if val.cols() != n {
                return Err(Error::dim("concat_rows", self.shape(vars[0]), self.shape(v)));
            }
            m += val.rows();
            out.extend_from_slice(val.data());
        }
        let rg = self.rg(vars);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatRows(vars.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let (m, n) = (v.rows(), v.cols());
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(Error::InvalidArgument {
                op: "gather_rows",
                reason: format!("row indices {rows:?} for {m} rows"),
            });
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(v.row(r));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), n], out)?,
            Op::GatherRows { x, rows: rows.to_vec() },
            rg,
        ))
    }

    /// Picks elements by flat index into a `[1×k]` row.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= v.len()) {
            return Err(Error::InvalidArgument {
                op: "gather_elems",
                reason: format!("indices {idx:?} for {} elements", v.len()),
            });
        }
        let out = idx.iter().map(|&i| v.data()[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::row_vector(out), Op::GatherElems { x, idx: idx.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from `root`, seeded with ones (the identity seed for a scalar).
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut param_grads = vec![None; self.param_vars.len()];
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if self.nodes[v.0].requires_grad && v.0 <= root.0 {
                    param_grads[pid] = grads[v.0].clone();
                }
            }
        }
        Gradients {
            nodes: grads,
            params: param_grads,
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if needs(a) {
                    acc(a, &|ga| tensor::gemm_nt(g, val(b).data(), ga, m, n, k));
                }
                if needs(b) {
                    acc(b, &|gb| tensor::gemm_tn(val(a).data(), g, gb, m, k, n));
                }
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[0];
                if needs(a) {
                    acc(a, &|ga| tensor::gemm_nn(g, val(b).data(), ga, m, n, k));
                }
                if needs(b) {
                    acc(b, &|gb| tensor::gemm_tn(g, val(a).data(), gb, m, n, k));
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = (val(a).shape()[0], val(a).shape()[1]);
                acc(a, &|ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &|ga| add_into(ga, g));
                acc(b, &|gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &|ga| add_into(ga, g));
                acc(b, &|gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            &Op::Mul(a, b) => {
                acc(a, &|ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(val(b).data()) {
                        *o += x * y;
                    }
                });
                acc(b, &|gb| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(val(a).data()) {
                        *o += x * y;
                    }
                });
            }
            &Op::AddRow(a, row) => {
                acc(a, &|ga| add_into(ga, g));
                let n = val(row).len();
                acc(row, &|gr| {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            &Op::MulRow(a, row) => {
                let n = val(row).len();
                let r = val(row).data();
                acc(a, &|ga| {
                    for (gchunk, ochunk) in g.chunks(n).zip(ga.chunks_mut(n)) {
                        for ((o, x), y) in ochunk.iter_mut().zip(gchunk).zip(r) {
                            *o += x * y;
                        }
                    }
                });
                acc(row, &|gr| {
                    for (gchunk, achunk) in g.chunks(n).zip(val(a).data().chunks(n)) {
                        for ((o, x), y) in gr.iter_mut().zip(gchunk).zip(achunk) {
                            *o += x * y;
                        }
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, &|ga| tensor::axpy(c, g, ga)),
            &Op::AddScalar(a) => acc(a, &|ga| add_into(ga, g)),
            Op::AddN(vars) => {
                for &v in vars {
                    acc(v, &|gv| add_into(gv, g));
                }
            }
            &Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let p = node.value.data();
                acc(x, &|gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * axis_len * inner + k * inner + i;
                            let dotp: f64 = (0..axis_len).map(|k| g[at(k)] * p[at(k)]).sum();
                            for k in 0..axis_len {
                                gx[at(k)] += p[at(k)] * (g[at(k)] - dotp);
                            }
                        }
                    }
                });
            }
            &Op::LogSoftmaxRows(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                acc(x, &|gx| {
                    for ((gr, yr), or) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let total: f64 = gr.iter().sum();
                        for ((o, gi), yi) in or.iter_mut().zip(gr).zip(yr) {
                            *o += gi - yi.exp() * total;
                        }
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(a, &|ga| {
                    for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            &Op::Gelu(a) => acc(a, &|ga| {
                for ((o, gi), xi) in ga.iter_mut().zip(g).zip(val(a).data()) {
                    *o += gi * tensor::gelu_grad(*xi);
                }
            }),
            &Op::Exp(a) => {
                let y = node.value.data();
                acc(a, &|ga| {
                    for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * yi;
                    }
                });
            }
            &Op::Ln(a) => acc(a, &|ga| {
                for ((o, gi), xi) in ga.iter_mut().zip(g).zip(val(a).data()) {
                    *o += gi / xi;
                }
            }),
            Op::LayerNorm { x, rstd } => {
                let y = node.value.data();
                let n = node.value.cols();
                acc(*x, &|gx| {
                    for (r, ((gr, yr), or)) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                        let sg: f64 = gr.iter().sum();
                        let sgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        let k = rstd[r] / n as f64;
                        for ((o, gi), yi) in or.iter_mut().zip(gr).zip(yr) {
                            *o += k * (n as f64 * gi - sg - yi * sgy);
                        }
                    }
                });
            }
            &Op::Clip { x, lo, hi } => acc(x, &|gx| {
                for ((o, gi), xi) in gx.iter_mut().zip(g).zip(val(x).data()) {
                    if *xi >= lo && *xi <= hi {
                        *o += gi;
                    }
                }
            }),
            &Op::Mse(a, b) => {
                let n = val(a).len() as f64;
                let g0 = g[0];
                let (da, db) = (val(a).data(), val(b).data());
                acc(a, &|ga| {
                    for ((o, x), y) in ga.iter_mut().zip(da).zip(db) {
                        *o += g0 * 2.0 * (x - y) / n;
                    }
                });
                acc(b, &|gb| {
                    for ((o, x), y) in gb.iter_mut().zip(da).zip(db) {
                        *o -= g0 * 2.0 * (x - y) / n;
                    }
                });
            }
            &Op::Mae(a, b) => {
                let n = val(a).len() as f64;
                let g0 = g[0];
                let (da, db) = (val(a).data(), val(b).data());
                let sign = |d: f64| {
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(a, &|ga| {
                    for ((o, x), y) in ga.iter_mut().zip(da).zip(db) {
                        *o += g0 * sign(x - y) / n;
                    }
                });
                acc(b, &|gb| {
                    for ((o, x), y) in gb.iter_mut().zip(da).zip(db) {
                        *o -= g0 * sign(x - y) / n;
                    }
                });
            }
            &Op::Sum(a) => acc(a, &|ga| ga.iter_mut().for_each(|o| *o += g[0])),
            &Op::Mean(a) => {
                let n = val(a).len() as f64;
                acc(a, &|ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            &Op::MeanRows(a) => {
                let (m, n) = (val(a).rows(), val(a).cols());
                acc(a, &|ga| {
                    for row in ga.chunks_mut(n) {
                        for (o, gi) in row.iter_mut().zip(g) {
                            *o += gi / m as f64;
                        }
                    }
                });
            }
            &Op::RowSums(a) => {
                let n = val(a).cols();
                acc(a, &|ga| {
                    for (row, gi) in ga.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|o| *o += gi);
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let y = node.value.data();
                let n = node.value.cols();
                acc(*x, &|gx| {
                    for (r, ((gr, yr), or)) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                        let gy = tensor::dot(gr, yr);
                        for ((o, gi), yi) in or.iter_mut().zip(gr).zip(yr) {
                            *o += (gi - yi * gy) / norms[r];
                        }
                    }
                });
            }
            &Op::SliceCols { x, start } => {
                let n = val(x).cols();
                let len = node.value.cols();
                acc(x, &|gx| {
                    for (gr, or) in g.chunks(len).zip(gx.chunks_mut(n)) {
                        add_into(&mut or[start..start + len], gr);
                    }
                });
            }
            Op::ConcatCols(vars) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &v in vars {
                    let w = val(v).cols();
                    acc(v, &|gv| {
                        for (gr, or) in g.chunks(total).zip(gv.chunks_mut(w)) {
                            add_into(or, &gr[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(vars) => {
                let mut offset = 0;
                for &v in vars {
                    let len = val(v).len();
                    acc(v, &|gv| add_into(gv, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows { x, rows } => {
                let n = val(*x).cols();
                acc(*x, &|gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                });
            }
            Op::GatherElems { x, idx } => acc(*x, &|gx| {
                for (k, &i) in idx.iter().enumerate() {
                    gx[i] += g[k];
                }
            }),
            &Op::Reshape(x) => acc(x, &|gx| add_into(gx, g)),
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to a node, if one reached it.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a stored parameter; `None` when frozen or unused.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| ParamId(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero_row() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let b = tape.constant(t(&[&[0.0], &[5.0]]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(
            tape.matmul(a, b),
            Err(Error::Dimension { lhs, rhs, .. }) if lhs == vec![2, 3] && rhs == vec![2, 3]
        ));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![0.0, 0.0, 0.0]));
        let p = tape.softmax(x, 1).unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::row_vector(vec![3f64.ln(), 0.0]));
        let p = tape.softmax(x, 1).unwrap();
        assert!((tape.value(p).data()[0] - 0.75).abs() < 1e-15);
        assert!((tape.value(p).data()[1] - 0.25).abs() < 1e-15);
        let x = tape.constant(Tensor::row_vector(vec![1000.0, 0.0]));
        let p = tape.softmax(x, 1).unwrap();
        assert_eq!(tape.value(p).data()[0], 1.0);
        assert!(tape.value(p).data()[1] >= 0.0 && tape.value(p).data()[1] < 1e-300);
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn softmax_along_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[0.0, 1.0], &[0.0, 1.0]]));
        let p = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn elementwise_reference_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.item(s), 0.5);
        let big = tape.constant(Tensor::scalar(100.0));
        let c = tape.clip(big, -6.0, 6.0).unwrap();
        assert_eq!(tape.item(c), 6.0);
        assert!(tape.clip(big, 1.0, -1.0).is_err());

        let a = tape.constant(Tensor::row_vector(vec![1.0, 1.0]));
        let m = tape.mse(a, a).unwrap();
        assert_eq!(tape.item(m), 0.0);
        let a = tape.constant(Tensor::row_vector(vec![0.0, 2.0]));
        let b = tape.constant(Tensor::row_vector(vec![1.0, 1.0]));
        let m = tape.mae(a, b).unwrap();
        assert_eq!(tape.item(m), 1.0);
    }

    #[test]
    fn gradient_of_root_is_identity_seed() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let g = tape.backward(x);
        assert_eq!(g.of(x).unwrap(), &[1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y);
        assert_eq!(g.of(x).unwrap(), &[6.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Gate, Tensor::scalar(2.0));
        let b = store.add("b", ParamGroup::Decoder, Tensor::scalar(5.0));
        let mut tape = Tape::with_trainable(&store, |g| g == ParamGroup::Gate);
        let (va, vb) = (tape.param(a), tape.param(b));
        let y = tape.mul(va, vb).unwrap();
        let g = tape.backward(y);
        assert_eq!(g.param(a).unwrap(), &[5.0]);
        assert!(g.param(b).is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let g = tape.backward(y);
        assert_eq!(g.of(x).unwrap(), &[2.0]);
    }

    #[test]
    fn normalize_rows_rejects_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 0.0], &[0.0, 0.0]]));
        assert!(matches!(tape.normalize_rows(x), Err(Error::ZeroNorm { row: 1, .. })));
    }
}
