//! Deterministic reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is an append-only arena of nodes. Every op validates shapes,
//! computes its forward value eagerly and rejects non-finite results. Because
//! nodes are appended in construction order, walking the arena backwards is a
//! valid reverse topological order, so [`Graph::backward`] is a single sweep.
//!
//! The op catalog is deliberately small: exactly what the toy decoder and the
//! ranking objective need.

use std::ops::Range;

use thiserror::Error;

pub type Shape = (usize, usize);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must be 1x1, got {0:?}")]
    NonScalarRoot(Shape),
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("non-finite loss while probing tensor {tensor} entry {index}")]
    NonFiniteProbe { tensor: usize, index: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "matrix",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: "matrix" });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> Shape {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Value of a 1x1 matrix (first entry otherwise).
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            data.extend((0..self.rows).map(|r| self.data[r * self.cols + c]));
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        const EXP: u64 = 0x7ff0_0000_0000_0000;
        // branch-free so the scan vectorizes
        !self.data.iter().fold(false, |bad, v| bad | (v.to_bits() & EXP == EXP))
    }

    fn add_assign(&mut self, other: &Matrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a · b`. Every output entry is accumulated from 0 over the inner index in
/// ascending order, so results do not depend on the blocking below.
fn matmul_nn(a: &Matrix, b: &Matrix) -> Matrix {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { matmul_nn_avx2(a, b) };
    }
    matmul_nn_kernel(a, b)
}

/// Same kernel compiled with wider vectors. No fused multiply-add is
/// introduced, so results are bit-identical to the portable build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_nn_avx2(a: &Matrix, b: &Matrix) -> Matrix {
    matmul_nn_kernel(a, b)
}

#[inline(always)]
fn matmul_nn_kernel(a: &Matrix, b: &Matrix) -> Matrix {
    const R: usize = 4;
    const C: usize = 8;
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    let full_rows = m - m % R;
    let full_cols = n - n % C;
    for i0 in (0..full_rows).step_by(R) {
        for j0 in (0..full_cols).step_by(C) {
            let mut acc = [[0.0f64; C]; R];
            for p in 0..k {
                let b_blk: &[f64; C] = b.data[p * n + j0..p * n + j0 + C].try_into().expect("block");
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let av = a.data[(i0 + r) * k + p];
                    for (o, bv) in acc_r.iter_mut().zip(b_blk) {
                        *o += av * bv;
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + C].copy_from_slice(acc_r);
            }
        }
    }
    // ragged right edge of the blocked rows, then the leftover rows
    for i in 0..m {
        let col_start = if i < full_rows { full_cols } else { 0 };
        if col_start == n {
            continue;
        }
        let out_row = &mut out[i * n + col_start..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let b_row = &b.data[p * n + col_start..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Matrix {
        rows: m,
        cols: n,
        data: out,
    }
}

/// `a · bᵀ`.
fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    matmul_nn(a, &b.transpose())
}

/// `aᵀ · b`.
fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    matmul_nn(&a.transpose(), b)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mask applied by [`Graph::masked_softmax`]; excluded positions get probability 0.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    None,
    /// Excludes column `j` from row `i` when `j > i`.
    Causal,
    /// Excludes column `j` from row `i` when `j > i + offset`: the rows are
    /// the continuation of an `offset`-token prefix.
    CausalOffset(usize),
    /// Row-major flags, `true` = excluded.
    Explicit(Vec<bool>),
}

impl Mask {
    fn excluded(&self, cols: usize, r: usize, c: usize) -> bool {
        match self {
            Mask::None => false,
            Mask::Causal => c > r,
            Mask::CausalOffset(offset) => c > r + offset,
            Mask::Explicit(flags) => flags[r * cols + c],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation identity of a node, with its parents.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    MaskedSoftmax(NodeId, Mask),
    RmsNorm { x: NodeId, gain: NodeId, eps: f64 },
    Gelu(NodeId),
    LogSigmoid(NodeId),
    Hinge(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Variance(NodeId),
    Entropy(NodeId),
    SquaredNorm(NodeId),
    GatherRows { table: NodeId, indices: Vec<usize> },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    /// Query-averaged attention mass per column span.
    SpanMass {
        attn: NodeId,
        rows: Range<usize>,
        spans: Vec<Range<usize>>,
    },
    /// Flat-index selection into a row vector.
    Select { x: NodeId, indices: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Gelu(_) => "gelu",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Hinge(_) => "hinge",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Variance(_) => "variance",
            Op::Entropy(_) => "entropy",
            Op::SquaredNorm(_) => "squared_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SpanMass { .. } => "span_mass",
            Op::Select { .. } => "select",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        self.for_each_parent(|p| out.push(p));
        out
    }

    fn for_each_parent(&self, mut f: impl FnMut(NodeId)) {
        match self {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::Sub(a, b) => {
                f(*a);
                f(*b);
            }
            Op::RmsNorm { x, gain, .. } => {
                f(*x);
                f(*gain);
            }
            Op::Scale(a, _)
            | Op::MaskedSoftmax(a, _)
            | Op::Gelu(a)
            | Op::LogSigmoid(a)
            | Op::Hinge(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Variance(a)
            | Op::Entropy(a)
            | Op::SquaredNorm(a) => f(*a),
            Op::GatherRows { table, .. } => f(*table),
            Op::SliceCols { x, .. } => f(*x),
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.iter().copied().for_each(f),
            Op::SpanMass { attn, .. } => f(*attn),
            Op::Select { x, .. } => f(*x),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of `id`, or `None` when no gradient reaches it (constants, unrelated nodes).
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.adjoints.get(id.0).and_then(|m| m.as_ref())
    }

    /// Adjoint of `id`, zero-filled when absent.
    pub fn get_or_zeros(&self, graph: &Graph, id: NodeId) -> Matrix {
        self.get(id).cloned().unwrap_or_else(|| {
            let (r, c) = graph.shape(id);
            Matrix::zeros(r, c)
        })
    }
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let mut requires_grad = false;
        op.for_each_parent(|p| requires_grad |= self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols != vb.rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let out = matmul_nn(va, vb);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols != vb.cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul_t",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let out = matmul_nt(va, vb);
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same("add", va, vb)?;
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same("sub", va, vb)?;
        let mut out = va.clone();
        for (x, y) in out.data.iter_mut().zip(&vb.data) {
            *x -= y;
        }
        self.push(out, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// Row-wise softmax; masked entries are exactly 0 and each row sums to 1
    /// over its unmasked entries.
    pub fn masked_softmax(&mut self, a: NodeId, mask: Mask) -> Result<NodeId> {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        if let Mask::Explicit(flags) = &mask {
            if flags.len() != rows * cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "masked_softmax",
                    left: va.shape(),
                    right: (flags.len(), 1),
                });
            }
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let src = va.row(r);
            let dst = &mut out.data[r * cols..(r + 1) * cols];
            // causal rows only ever touch the prefix 0..=r
            let width = match mask {
                Mask::Causal => (r + 1).min(cols),
                Mask::CausalOffset(offset) => (r + offset + 1).min(cols),
                _ => cols,
            };
            let explicit = matches!(mask, Mask::Explicit(_));
            let keep = |c: usize| !explicit || !mask.excluded(cols, r, c);
            let mut max = f64::NEG_INFINITY;
            for c in (0..width).filter(|&c| keep(c)) {
                max = max.max(src[c]);
            }
            if max == f64::NEG_INFINITY {
                return Err(AutodiffError::InvalidArgument {
                    op: "masked_softmax",
                    reason: format!("row {r} is fully masked"),
                });
            }
            let mut total = 0.0;
            for c in (0..width).filter(|&c| keep(c)) {
                let e = (src[c] - max).exp();
                dst[c] = e;
                total += e;
            }
            for v in &mut dst[..width] {
                *v /= total;
            }
        }
        self.push(out, Op::MaskedSoftmax(a, mask))
    }

    /// `x / rms(x_row) * gain`, gain a `1 × cols` row.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> Result<NodeId> {
        let (vx, vg) = (self.value(x), self.value(gain));
        if vg.rows != 1 || vg.cols != vx.cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "rms_norm",
                left: vx.shape(),
                right: vg.shape(),
            });
        }
        let mut out = Matrix::zeros(vx.rows, vx.cols);
        for r in 0..vx.rows {
            let row = vx.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / vx.cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for c in 0..vx.cols {
                out.set(r, c, row[c] * inv * vg.data[c]);
            }
        }
        self.push(out, Op::RmsNorm { x, gain, eps })
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = gelu(*x));
        self.push(out, Op::Gelu(a))
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = log_sigmoid(*x));
        self.push(out, Op::LogSigmoid(a))
    }

    /// `max(0, x)` elementwise.
    pub fn hinge(&mut self, a: NodeId) -> Result<NodeId> {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(out, Op::Hinge(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data.iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "mean",
                reason: "empty input".into(),
            });
        }
        let m = va.data.iter().sum::<f64>() / va.len() as f64;
        self.push(Matrix::scalar(m), Op::Mean(a))
    }

    /// Population variance over all entries.
    pub fn variance(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "variance",
                reason: "empty input".into(),
            });
        }
        let n = va.len() as f64;
        let mean = va.data.iter().sum::<f64>() / n;
        let var = va.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        self.push(Matrix::scalar(var), Op::Variance(a))
    }

    /// Shannon entropy (nats) of a probability vector, with `0 · ln 0 = 0`.
    pub fn entropy(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.data.iter().any(|&p| p < 0.0) {
            return Err(AutodiffError::InvalidArgument {
                op: "entropy",
                reason: "negative probability".into(),
            });
        }
        let h = entropy_of(&va.data);
        self.push(Matrix::scalar(h), Op::Entropy(a))
    }

    pub fn squared_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data.iter().map(|v| v * v).sum();
        self.push(Matrix::scalar(s), Op::SquaredNorm(a))
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vt.rows) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                reason: format!("row {bad} out of range for {} rows", vt.rows),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * vt.cols);
        for &i in indices {
            data.extend_from_slice(vt.row(i));
        }
        let out = Matrix {
            rows: indices.len(),
            cols: vt.cols,
            data,
        };
        self.push(
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if start + len > vx.cols {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_cols",
                reason: format!("columns {start}..{} out of range for {}", start + len, vx.cols),
            });
        }
        let mut data = Vec::with_capacity(vx.rows * len);
        for r in 0..vx.rows {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let out = Matrix {
            rows: vx.rows,
            cols: len,
            data,
        };
        self.push(out, Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::InvalidArgument {
                op: "concat_cols",
                reason: "no inputs".into(),
            });
        };
        let rows = self.value(first).rows;
        for &p in parts {
            if self.value(p).rows != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(first).shape(),
                    right: self.value(p).shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p);
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + vp.cols].copy_from_slice(vp.row(r));
            }
            offset += vp.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks inputs with equal column counts top to bottom.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::InvalidArgument {
                op: "concat_rows",
                reason: "no inputs".into(),
            });
        };
        let cols = self.value(first).cols;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            if vp.cols != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(first).shape(),
                    right: vp.shape(),
                });
            }
            rows += vp.rows;
            data.extend_from_slice(&vp.data);
        }
        let out = Matrix {
            rows,
            cols,
            data,
        };
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// `out[d] = (1/|rows|) Σ_{i∈rows} Σ_{j∈spans[d]} attn[i, j]`, as a `1 × spans.len()` row.
    pub fn span_mass(
        &mut self,
        attn: NodeId,
        rows: Range<usize>,
        spans: &[Range<usize>],
    ) -> Result<NodeId> {
        let va = self.value(attn);
        if rows.is_empty() || rows.end > va.rows {
            return Err(AutodiffError::InvalidArgument {
                op: "span_mass",
                reason: format!("row range {rows:?} invalid for {} rows", va.rows),
            });
        }
        if let Some(bad) = spans.iter().find(|s| s.end > va.cols) {
            return Err(AutodiffError::InvalidArgument {
                op: "span_mass",
                reason: format!("column span {bad:?} out of range for {} columns", va.cols),
            });
        }
        let values = span_mass_values(va, rows.clone(), spans);
        self.push(
            Matrix::row_vector(values),
            Op::SpanMass {
                attn,
                rows,
                spans: spans.to_vec(),
            },
        )
    }

    /// Picks entries by flat row-major index into a `1 × indices.len()` row.
    pub fn select(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vx.len()) {
            return Err(AutodiffError::InvalidArgument {
                op: "select",
                reason: format!("index {bad} out of range for {} entries", vx.len()),
            });
        }
        let out = Matrix::row_vector(indices.iter().map(|&i| vx.data[i]).collect());
        self.push(
            out,
            Op::Select {
                x,
                indices: indices.to_vec(),
            },
        )
    }

    /// Reverse sweep from a 1x1 root. Does not mutate the graph, so repeated
    /// calls give identical adjoints.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(shape));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj);
            adj[idx] = Some(g);
        }
        for (idx, slot) in adj.iter_mut().enumerate() {
            if !self.nodes[idx].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, node: &Node, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let mut acc = |id: NodeId, delta: Matrix| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut adj[id.0] {
                Some(m) => m.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |id: NodeId| &self.nodes[id.0].value;
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        let scalar_g = g.data[0];

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    acc(*a, matmul_nt(g, val(*b)));
                }
                if rg(*b) {
                    acc(*b, matmul_tn(val(*a), g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if rg(*a) {
                    acc(*a, matmul_nn(g, val(*b)));
                }
                if rg(*b) {
                    acc(*b, matmul_tn(g, val(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                let mut neg = g.clone();
                neg.data.iter_mut().for_each(|v| *v = -*v);
                acc(*b, neg);
            }
            Op::Scale(a, f) => {
                let mut d = g.clone();
                d.data.iter_mut().for_each(|v| *v *= f);
                acc(*a, d);
            }
            Op::MaskedSoftmax(a, _) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..y.cols {
                        d.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::RmsNorm { x, gain, eps } => {
                let vx = val(*x);
                let vg = val(*gain);
                let cols = vx.cols;
                let mut dx = Matrix::zeros(vx.rows, cols);
                let mut dgain = Matrix::zeros(1, cols);
                for r in 0..vx.rows {
                    let row = vx.row(r);
                    let gr = g.row(r);
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let mut proj = 0.0;
                    for c in 0..cols {
                        let xhat = row[c] * inv;
                        dgain.data[c] += gr[c] * xhat;
                        proj += gr[c] * vg.data[c] * xhat;
                    }
                    proj /= cols as f64;
                    for c in 0..cols {
                        let xhat = row[c] * inv;
                        dx.data[r * cols + c] = inv * (gr[c] * vg.data[c] - xhat * proj);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
            }
            Op::Gelu(a) => {
                let vx = val(*a);
                let mut d = g.clone();
                for (dv, xv) in d.data.iter_mut().zip(&vx.data) {
                    *dv *= gelu_grad(*xv);
                }
                acc(*a, d);
            }
            Op::LogSigmoid(a) => {
                let vx = val(*a);
                let mut d = g.clone();
                for (dv, xv) in d.data.iter_mut().zip(&vx.data) {
                    *dv *= sigmoid(-xv);
                }
                acc(*a, d);
            }
            Op::Hinge(a) => {
                let vx = val(*a);
                let mut d = g.clone();
                for (dv, xv) in d.data.iter_mut().zip(&vx.data) {
                    if *xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::from_fn(r, c, |_, _| scalar_g));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                let v = scalar_g / (r * c) as f64;
                acc(*a, Matrix::from_fn(r, c, |_, _| v));
            }
            Op::Variance(a) => {
                let vx = val(*a);
                let n = vx.len() as f64;
                let mean = vx.data.iter().sum::<f64>() / n;
                let mut d = vx.clone();
                d.data
                    .iter_mut()
                    .for_each(|v| *v = scalar_g * 2.0 * (*v - mean) / n);
                acc(*a, d);
            }
            Op::Entropy(a) => {
                // dH/dp = -(ln p + 1); zero-probability entries get 0 (0·ln 0 convention).
                let vx = val(*a);
                let mut d = vx.clone();
                d.data.iter_mut().for_each(|p| {
                    *p = if *p > 0.0 {
                        -scalar_g * (p.ln() + 1.0)
                    } else {
                        0.0
                    }
                });
                acc(*a, d);
            }
            Op::SquaredNorm(a) => {
                let mut d = val(*a).clone();
                d.data.iter_mut().for_each(|v| *v *= 2.0 * scalar_g);
                acc(*a, d);
            }
            Op::GatherRows { table, indices } => {
                let vt = val(*table);
                let mut d = Matrix::zeros(vt.rows, vt.cols);
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut d.data[i * vt.cols..(i + 1) * vt.cols];
                    for (o, v) in dst.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*table, d);
            }
            Op::SliceCols { x, start, len } => {
                let (rows, cols) = val(*x).shape();
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    d.data[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                }
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = val(p).shape();
                    if rg(p) {
                        let d = Matrix::from_fn(rows, cols, |r, c| g.get(r, offset + c));
                        acc(p, d);
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if rg(p) {
                        let (rows, cols) = val(p).shape();
                        let d = Matrix {
                            rows,
                            cols,
                            data: g.data[offset..offset + n].to_vec(),
                        };
                        acc(p, d);
                    }
                    offset += n;
                }
            }
            Op::SpanMass { attn, rows, spans } => {
                let (nr, nc) = val(*attn).shape();
                let inv = 1.0 / rows.len() as f64;
                let mut d = Matrix::zeros(nr, nc);
                for (k, span) in spans.iter().enumerate() {
                    let gv = g.data[k] * inv;
                    for i in rows.clone() {
                        for j in span.clone() {
                            d.data[i * nc + j] += gv;
                        }
                    }
                }
                acc(*attn, d);
            }
            Op::Select { x, indices } => {
                let (nr, nc) = val(*x).shape();
                let mut d = Matrix::zeros(nr, nc);
                for (k, &i) in indices.iter().enumerate() {
                    d.data[i] += g.data[k];
                }
                acc(*x, d);
            }
        }
    }
}

/// `(1/|rows|) Σ_{i∈rows} Σ_{j∈span} m[i, j]` for each span, summing row by row
/// then left to right. Ranges must be in bounds.
pub fn span_mass_values(m: &Matrix, rows: Range<usize>, spans: &[Range<usize>]) -> Vec<f64> {
    let inv = 1.0 / rows.len() as f64;
    spans
        .iter()
        .map(|span| {
            let mut acc = 0.0;
            for i in rows.clone() {
                for &v in &m.row(i)[span.clone()] {
                    acc += v;
                }
            }
            acc * inv
        })
        .collect()
}

/// Shannon entropy in nats, `0 · ln 0 = 0`.
pub fn entropy_of(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_relative_error: f64,
    /// Max relative error per parameter tensor, in input order.
    pub per_tensor: Vec<f64>,
    /// (tensor, flat index) of the worst entry.
    pub worst: (usize, usize),
}

/// Compares reverse-mode gradients with central differences on every entry
/// of every parameter tensor.
///
/// `loss_fn` receives a graph and the node ids of `params` (registered as
/// trainable leaves for the analytic pass, as constants for probes) and must
/// return a 1x1 node. The error per entry is
/// `|analytic − numeric| / (|numeric| + 1e-8)`.
pub fn finite_difference_check<F>(loss_fn: F, params: &[Matrix], step: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(AutodiffError::InvalidStep(step));
    }
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| graph.param(p.clone())).collect();
    let root = loss_fn(&mut graph, &ids)?;
    let grads = graph.backward(root)?;
    let analytic: Vec<Matrix> = ids.iter().map(|&id| grads.get_or_zeros(&graph, id)).collect();

    let eval = |values: &[Matrix], tensor: usize, index: usize| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|p| g.constant(p.clone())).collect();
        let loss = match loss_fn(&mut g, &ids) {
            Ok(root) => g.value(root).item(),
            Err(AutodiffError::NonFinite { .. }) => f64::NAN,
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(AutodiffError::NonFiniteProbe { tensor, index });
        }
        Ok(loss)
    };

    let mut work: Vec<Matrix> = params.to_vec();
    let mut per_tensor = vec![0.0f64; params.len()];
    let mut worst = (0, 0);
    let mut max_err = 0.0f64;
    for t in 0..params.len() {
        for i in 0..params[t].len() {
            let orig = params[t].data[i];
            work[t].data[i] = orig + step;
            let up = eval(&work, t, i)?;
            work[t].data[i] = orig - step;
            let down = eval(&work, t, i)?;
            work[t].data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (analytic[t].data[i] - numeric).abs() / (numeric.abs() + 1e-8);
            if err > per_tensor[t] {
                per_tensor[t] = err;
            }
            if err > max_err {
                max_err = err;
                worst = (t, i);
            }
        }
    }
    Ok(FdReport {
        max_relative_error: max_err,
        per_tensor,
        worst,
    })
}
