//! Define-by-run computation graph with reverse-mode gradients.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse creation order and
//! accumulates gradients into every node that (transitively) depends on a
//! parameter leaf. Nodes that do not reach the loss keep a zero gradient.

use crate::error::{Error, Result};

use super::tensor::{matmul_into, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Stabilizer used by layer normalization and guarded divisions.
pub const EPS: f64 = 1e-8;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Std(Var),
    ColSum(Var),
    ColMean(Var),
    RowSum(Var),
    Relu(Var),
    /// Input and the pointwise derivative computed in the forward pass.
    Gelu(Var, Tensor),
    Softplus(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    RowNorm(Var),
    RowCosine(Var, Var),
    RowEntropy(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice {
        x: Var,
        r0: usize,
        c0: usize,
    },
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        heads: usize,
        /// Softmax weights per (block, head), `block×block` each.
        weights: Vec<Tensor>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b)
            | Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Div(a, b)
            | AddRow(a, b)
            | MulRow(a, b)
            | MulCol(a, b)
            | RowCosine(a, b) => vec![*a, *b],
            Transpose(a)
            | Scale(a, _)
            | AddScalar(a)
            | Sum(a)
            | Mean(a)
            | Std(a)
            | ColSum(a)
            | ColMean(a)
            | RowSum(a)
            | Relu(a)
            | Gelu(a, _)
            | Softplus(a)
            | Softmax(a)
            | LogSoftmax(a)
            | RowNorm(a)
            | RowEntropy(a)
            | Reshape(a) => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
            Slice { x, .. } | GatherRows(x, _) | ScatterRows(x, _) => vec![*x],
            BlockAttention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension { op, lhs: a.shape(), rhs: b.shape() }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// GELU value and derivative sharing one `tanh`.
fn gelu_with_grad(x: f64) -> (f64, f64) {
    // tanh(u) = 1 − 2/(e^{2u} + 1); cheaper than `f64::tanh` and exact at
    // both saturation limits.
    let t = 1.0 - 2.0 / ((2.0 * GELU_C * (x + GELU_A * x * x * x)).exp() + 1.0);
    let value = 0.5 * x * (1.0 + t);
    let grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (value, grad)
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn check_probability_row(row: &[f64]) -> Result<()> {
    if let Some(v) = row.iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(Error::ProbabilityDomain(format!("entry {v} is negative or NaN")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::ProbabilityDomain(format!("entries sum to {s}")));
    }
    Ok(())
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy_of(p: &[f64]) -> Result<f64> {
    check_probability_row(p)?;
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`; zero when
    /// `v` does not reach the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shape(v);
                Tensor::zeros(r, c)
            }
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(dim_err("matmul", ta, tb));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.cols());
        matmul_into(ta, tb, &mut out);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let out = ta.zip_map(tb, f);
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::NumericDomain("div: zero divisor".into()));
        }
        self.binary_same("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `x[n×d] + b[1×d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(dim_err("add_row", tx, tb));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    /// `x[n×d] ⊙ g[1×d]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        if tg.rows() != 1 || tg.cols() != tx.cols() {
            return Err(dim_err("mul_row", tx, tg));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, gv) in out.row_mut(r).iter_mut().zip(tg.data()) {
                *o *= gv;
            }
        }
        Ok(self.push(out, Op::MulRow(x, g)))
    }

    /// `x[n×d] ⊙ c[n×1]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(c));
        if tc.cols() != 1 || tc.rows() != tx.rows() {
            return Err(dim_err("mul_col", tx, tc));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            let s = tc.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(out, Op::MulCol(x, c)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.rows(), t.cols());
        let mut deriv = Tensor::zeros(t.rows(), t.cols());
        for ((o, d), &xv) in out.data_mut().iter_mut().zip(deriv.data_mut()).zip(t.data()) {
            (*o, *d) = gelu_with_grad(xv);
        }
        self.push(out, Op::Gelu(x, deriv))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus_scalar);
        self.push(out, Op::Softplus(x))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::EmptyInput("mean"));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        Ok(self.push(out, Op::Mean(x)))
    }

    /// Population standard deviation over all entries.
    pub fn std(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::EmptyInput("std"));
        }
        let n = t.len() as f64;
        let mu = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(var.sqrt()), Op::Std(x)))
    }

    /// Sum down each column: `n×d → 1×d`.
    pub fn col_sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        self.push(out, Op::ColSum(x))
    }

    /// Mean down each column: `n×d → 1×d`.
    pub fn col_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rows() == 0 {
            return Err(Error::EmptyInput("col_mean"));
        }
        let n = t.rows() as f64;
        let mut out = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        out.data_mut().iter_mut().for_each(|v| *v /= n);
        Ok(self.push(out, Op::ColMean(x)))
    }

    /// Sum across each row: `n×d → n×1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(t.rows(), 1, data).expect("row_sum shape");
        self.push(out, Op::RowSum(x))
    }

    // ---- normalizations -------------------------------------------------

    /// Row-wise softmax (last axis).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::NumericDomain("softmax: non-finite input".into()));
        }
        if t.cols() == 0 {
            return Err(Error::EmptyInput("softmax"));
        }
        let out = softmax_rows(t);
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::NumericDomain("log_softmax: non-finite input".into()));
        }
        if t.cols() == 0 {
            return Err(Error::EmptyInput("log_softmax"));
        }
        let mut out = t.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.push(out, Op::LogSoftmax(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.layer_norm_eps(x, gain, bias, EPS)
    }

    /// Per-row standardization followed by `⊙ gain + bias`.
    pub fn layer_norm_eps(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.shape() != (1, d) {
            return Err(dim_err("layer_norm(gain)", tx, tg));
        }
        if tb.shape() != (1, d) {
            return Err(dim_err("layer_norm(bias)", tx, tb));
        }
        if d == 0 {
            return Err(Error::EmptyInput("layer_norm"));
        }
        let mut xhat = Tensor::zeros(tx.rows(), d);
        let mut inv_std = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let denom = var + eps;
            if denom <= 0.0 {
                return Err(Error::NumericDomain(format!("layer_norm: zero variance with eps={eps} (d={d})")));
            }
            let inv = 1.0 / denom.sqrt();
            inv_std.push(inv);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mu) * inv;
            }
        }
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for ((o, g), b) in out.row_mut(r).iter_mut().zip(tg.data()).zip(tb.data()) {
                *o = *o * g + b;
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    // ---- geometry -------------------------------------------------------

    /// Euclidean norm of each row: `n×d → n×1`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = (0..t.rows()).map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let out = Tensor::from_vec(t.rows(), 1, data).expect("row_norm shape");
        self.push(out, Op::RowNorm(x))
    }

    /// Cosine similarity of matching rows: `n×d, n×d → n×1`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("row_cosine", ta, tb));
        }
        let mut data = Vec::with_capacity(ta.rows());
        for r in 0..ta.rows() {
            let (ra, rb) = (ta.row(r), tb.row(r));
            let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::NumericDomain("cosine similarity of a zero-norm embedding".into()));
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            data.push(dot / (na * nb));
        }
        let out = Tensor::from_vec(ta.rows(), 1, data)?;
        Ok(self.push(out, Op::RowCosine(a, b)))
    }

    /// Entropy of each probability row: `n×d → n×1`.
    pub fn row_entropy(&mut self, p: Var) -> Result<Var> {
        let t = self.value(p);
        let mut data = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            data.push(entropy_of(t.row(r))?);
        }
        let out = Tensor::from_vec(t.rows(), 1, data)?;
        Ok(self.push(out, Op::RowEntropy(p)))
    }

    /// Entropy of a single probability vector (`1×d`) as a scalar node.
    pub fn entropy(&mut self, p: Var) -> Result<Var> {
        if self.value(p).rows() != 1 {
            let t = self.value(p);
            return Err(Error::Dimension { op: "entropy", lhs: t.shape(), rhs: (1, t.cols()) });
        }
        self.row_entropy(p)
    }

    // ---- structure ------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_cols"))?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(dim_err("concat_cols", self.value(first), t));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                out.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_rows"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(dim_err("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `r0..r1`, columns `c0..c1`.
    pub fn slice(&mut self, x: Var, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<Var> {
        let t = self.value(x);
        if r0 > r1 || c0 > c1 || r1 > t.rows() || c1 > t.cols() {
            return Err(Error::Dimension { op: "slice", lhs: t.shape(), rhs: (r1, c1) });
        }
        let out = t.slice(r0, r1, c0, c1);
        Ok(self.push(out, Op::Slice { x, r0, c0 }))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshaped(rows, cols)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Rows of `x` at `indices`, in order.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Dimension { op: "gather_rows", lhs: t.shape(), rhs: (bad, 0) });
        }
        let mut out = Tensor::zeros(indices.len(), t.cols());
        for (k, &i) in indices.iter().enumerate() {
            out.row_mut(k).copy_from_slice(t.row(i));
        }
        Ok(self.push(out, Op::GatherRows(x, indices.to_vec())))
    }

    /// Places row `k` of `x` at row `indices[k]` of an `n_rows`-row zero
    /// matrix, summing collisions.
    pub fn scatter_rows(&mut self, x: Var, indices: &[usize], n_rows: usize) -> Result<Var> {
        let t = self.value(x);
        if indices.len() != t.rows() {
            return Err(Error::LengthMismatch(indices.len(), t.rows()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_rows) {
            return Err(Error::Dimension { op: "scatter_rows", lhs: (n_rows, t.cols()), rhs: (bad, 0) });
        }
        let mut out = Tensor::zeros(n_rows, t.cols());
        for (k, &i) in indices.iter().enumerate() {
            for (o, v) in out.row_mut(i).iter_mut().zip(t.row(k)) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::ScatterRows(x, indices.to_vec())))
    }

    /// Scaled dot-product attention `softmax(Q Kᵀ/√d_k) V` applied
    /// independently to every `block`-row group and every one of `heads`
    /// equal column groups; heads stay in place along columns. Returns the
    /// output and the softmax weights, ordered by block then head.
    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        heads: usize,
    ) -> Result<(Var, Vec<Tensor>)> {
        let (rows, cols) = self.shape(q);
        if self.shape(k) != (rows, cols) || self.shape(v) != (rows, cols) {
            return Err(dim_err("block_attention", self.value(q), self.value(k)));
        }
        if block == 0 || heads == 0 || rows % block != 0 || cols % heads != 0 {
            return Err(Error::Config(format!(
                "block_attention: {rows}×{cols} does not split into blocks of {block} rows and {heads} heads"
            )));
        }
        let dk = cols / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Tensor::zeros(rows, cols);
        let mut weights = Vec::with_capacity(rows / block * heads);
        for b in 0..rows / block {
            let r0 = b * block;
            for h in 0..heads {
                let c0 = h * dk;
                let mut a = Tensor::zeros(block, block);
                for i in 0..block {
                    let qi = &tq.row(r0 + i)[c0..c0 + dk];
                    for j in 0..block {
                        let kj = &tk.row(r0 + j)[c0..c0 + dk];
                        a.set(i, j, qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale);
                    }
                }
                let a = softmax_rows(&a);
                for i in 0..block {
                    let o = &mut out.row_mut(r0 + i)[c0..c0 + dk];
                    for j in 0..block {
                        let w = a.get(i, j);
                        for (ov, vv) in o.iter_mut().zip(&tv.row(r0 + j)[c0..c0 + dk]) {
                            *ov += w * vv;
                        }
                    }
                }
                weights.push(a);
            }
        }
        let op = Op::BlockAttention { q, k, v, block, heads, weights: weights.clone() };
        Ok((self.push(out, op), weights))
    }

    // ---- backward -------------------------------------------------------

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar `loss`. Previous gradients are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.shape() != (1, 1) {
            return Err(Error::Dimension { op: "backward", lhs: lt.shape(), rhs: (1, 1) });
        }
        if !lt.is_finite() {
            return Err(Error::Evaluation(format!("non-finite loss {}", lt.item())));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &g);
            self.nodes[i].op = op;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize, op: &Op, g: &Tensor) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let tb = &self.nodes[b.0].value;
                    let mut ga = Tensor::zeros(g.rows(), tb.rows());
                    matmul_nt_acc(g, tb, &mut ga);
                    self.accumulate(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let ta = &self.nodes[a.0].value;
                    let mut gb = Tensor::zeros(ta.cols(), g.cols());
                    matmul_tn_acc(ta, g, &mut gb);
                    self.accumulate(*b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(*a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(&self.nodes[b.0].value, |x, y| x * y);
                let gb = g.zip_map(&self.nodes[a.0].value, |x, y| x * y);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Div(a, b) => {
                let tb = &self.nodes[b.0].value;
                let ga = g.zip_map(tb, |x, y| x / y);
                let out = &self.nodes[i].value;
                let gb = g.zip_map(out, |x, o| x * o).zip_map(tb, |x, y| -x / y);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::AddRow(x, b) => {
                self.accumulate(*x, g.clone());
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(*b, gb);
            }
            Op::MulRow(x, w) => {
                let tw = &self.nodes[w.0].value;
                let tx = &self.nodes[x.0].value;
                let mut gx = g.clone();
                let mut gw = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        gx.set(r, c, g.get(r, c) * tw.get(0, c));
                        gw.data_mut()[c] += g.get(r, c) * tx.get(r, c);
                    }
                }
                self.accumulate(*x, gx);
                self.accumulate(*w, gw);
            }
            Op::MulCol(x, c) => {
                let tc = &self.nodes[c.0].value;
                let tx = &self.nodes[x.0].value;
                let mut gx = g.clone();
                let mut gc = Tensor::zeros(g.rows(), 1);
                for r in 0..g.rows() {
                    let s = tc.get(r, 0);
                    let mut acc = 0.0;
                    for (k, o) in gx.row_mut(r).iter_mut().enumerate() {
                        acc += *o * tx.get(r, k);
                        *o *= s;
                    }
                    gc.data_mut()[r] = acc;
                }
                self.accumulate(*x, gx);
                self.accumulate(*c, gc);
            }
            Op::Scale(x, s) => self.accumulate(*x, g.map(|v| v * s)),
            Op::AddScalar(x) => self.accumulate(*x, g.clone()),
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(*x, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(*x, Tensor::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::Std(x) => {
                let tx = &self.nodes[x.0].value;
                let s = self.nodes[i].value.item();
                let n = tx.len() as f64;
                let gx = if s > 0.0 {
                    let mu = tx.sum() / n;
                    let k = g.item() / (n * s);
                    tx.map(|v| k * (v - mu))
                } else {
                    Tensor::zeros(tx.rows(), tx.cols())
                };
                self.accumulate(*x, gx);
            }
            Op::ColSum(x) | Op::ColMean(x) => {
                let (r, c) = self.shape(*x);
                let k = if matches!(op, Op::ColMean(_)) { 1.0 / r as f64 } else { 1.0 };
                let mut gx = Tensor::zeros(r, c);
                for row in 0..r {
                    for (o, v) in gx.row_mut(row).iter_mut().zip(g.data()) {
                        *o = v * k;
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::RowSum(x) => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                for row in 0..r {
                    let v = g.get(row, 0);
                    gx.row_mut(row).iter_mut().for_each(|o| *o = v);
                }
                self.accumulate(*x, gx);
            }
            Op::Relu(x) => {
                let gx = g.zip_map(&self.nodes[x.0].value, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(*x, gx);
            }
            Op::Gelu(x, deriv) => {
                let gx = g.zip_map(deriv, |gv, d| gv * d);
                self.accumulate(*x, gx);
            }
            Op::Softplus(x) => {
                let gx = g.zip_map(&self.nodes[x.0].value, |gv, xv| gv * sigmoid(xv));
                self.accumulate(*x, gx);
            }
            Op::Softmax(x) => {
                let y = &self.nodes[i].value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::LogSoftmax(x) => {
                let y = &self.nodes[i].value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = gv - yv.exp() * total;
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let tg = &self.nodes[gain.0].value;
                let (rows, d) = xhat.shape();
                let mut gx = Tensor::zeros(rows, d);
                let mut ggain = Tensor::zeros(1, d);
                let mut gbias = Tensor::zeros(1, d);
                let mut dxhat = vec![0.0; d];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    let mut mean_dx = 0.0;
                    let mut mean_dx_x = 0.0;
                    for c in 0..d {
                        ggain.data_mut()[c] += gr[c] * xr[c];
                        gbias.data_mut()[c] += gr[c];
                        dxhat[c] = gr[c] * tg.data()[c];
                        mean_dx += dxhat[c];
                        mean_dx_x += dxhat[c] * xr[c];
                    }
                    mean_dx /= d as f64;
                    mean_dx_x /= d as f64;
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = inv * (dxhat[c] - mean_dx - xr[c] * mean_dx_x);
                    }
                }
                self.accumulate(*x, gx);
                self.accumulate(*gain, ggain);
                self.accumulate(*bias, gbias);
            }
            Op::RowNorm(x) => {
                let tx = &self.nodes[x.0].value;
                let norms = &self.nodes[i].value;
                let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                for r in 0..tx.rows() {
                    let n = norms.get(r, 0);
                    if n > 0.0 {
                        let k = g.get(r, 0) / n;
                        for (o, v) in gx.row_mut(r).iter_mut().zip(tx.row(r)) {
                            *o = k * v;
                        }
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::RowCosine(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let cos = &self.nodes[i].value;
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                for r in 0..ta.rows() {
                    let (ra, rb) = (ta.row(r), tb.row(r));
                    let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let c = cos.get(r, 0);
                    let gr = g.get(r, 0);
                    for k in 0..ra.len() {
                        ga.row_mut(r)[k] = gr * (rb[k] / (na * nb) - c * ra[k] / (na * na));
                        gb.row_mut(r)[k] = gr * (ra[k] / (na * nb) - c * rb[k] / (nb * nb));
                    }
                }
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::RowEntropy(p) => {
                let tp = &self.nodes[p.0].value;
                let mut gp = Tensor::zeros(tp.rows(), tp.cols());
                for r in 0..tp.rows() {
                    let gr = g.get(r, 0);
                    for (o, &v) in gp.row_mut(r).iter_mut().zip(tp.row(r)) {
                        *o = if v > 0.0 { -gr * (v.ln() + 1.0) } else { 0.0 };
                    }
                }
                self.accumulate(*p, gp);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let gp = g.slice(0, r, c0, c0 + c);
                    c0 += c;
                    self.accumulate(p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let gp = g.slice(r0, r0 + r, 0, c);
                    r0 += r;
                    self.accumulate(p, gp);
                }
            }
            Op::Slice { x, r0, c0 } => {
                let (rx, cx) = self.shape(*x);
                let mut gx = Tensor::zeros(rx, cx);
                for r in 0..g.rows() {
                    gx.row_mut(r0 + r)[*c0..*c0 + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(*x, gx);
            }
            Op::Reshape(x) => {
                let (r, c) = self.shape(*x);
                let gx = g.clone().reshaped(r, c).expect("reshape grad");
                self.accumulate(*x, gx);
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                for (k, &row) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(row).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::ScatterRows(x, idx) => {
                let c = g.cols();
                let mut gx = Tensor::zeros(idx.len(), c);
                for (k, &row) in idx.iter().enumerate() {
                    gx.row_mut(k).copy_from_slice(g.row(row));
                }
                self.accumulate(*x, gx);
            }
            Op::BlockAttention { q, k, v, block, heads, weights } => {
                let (tq, tk, tv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
                let (rows, cols) = tq.shape();
                let (block, heads) = (*block, *heads);
                let dk = cols / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let mut gq = Tensor::zeros(rows, cols);
                let mut gk = Tensor::zeros(rows, cols);
                let mut gv = Tensor::zeros(rows, cols);
                let mut ds = Tensor::zeros(block, block);
                for b in 0..rows / block {
                    let r0 = b * block;
                    for h in 0..heads {
                        let c0 = h * dk;
                        let a = &weights[b * heads + h];
                        for i in 0..block {
                            let gi = &g.row(r0 + i)[c0..c0 + dk];
                            let mut dot = 0.0;
                            for j in 0..block {
                                let da: f64 = gi.iter().zip(&tv.row(r0 + j)[c0..c0 + dk]).map(|(x, y)| x * y).sum();
                                ds.set(i, j, da);
                                dot += da * a.get(i, j);
                            }
                            for j in 0..block {
                                let w = a.get(i, j);
                                ds.set(i, j, w * (ds.get(i, j) - dot) * scale);
                                for (o, gv_) in gv.row_mut(r0 + j)[c0..c0 + dk].iter_mut().zip(gi) {
                                    *o += w * gv_;
                                }
                            }
                        }
                        for i in 0..block {
                            for j in 0..block {
                                let d = ds.get(i, j);
                                for (o, kv) in
                                    gq.row_mut(r0 + i)[c0..c0 + dk].iter_mut().zip(&tk.row(r0 + j)[c0..c0 + dk])
                                {
                                    *o += d * kv;
                                }
                                for (o, qv) in
                                    gk.row_mut(r0 + j)[c0..c0 + dk].iter_mut().zip(&tq.row(r0 + i)[c0..c0 + dk])
                                {
                                    *o += d * qv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(*q, gq);
                self.accumulate(*k, gk);
                self.accumulate(*v, gv);
            }
        }
    }
}
