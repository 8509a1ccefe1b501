//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate produced during a forward pass. Ops are
//! methods on the tape that take and return [`Var`] handles; nodes are stored
//! in creation order, which is already a topological order, so the backward
//! pass is a single reverse sweep.
//!
//! Broadcasting is deliberately absent apart from scalar scaling and the
//! per-feature gain/bias of [`Tape::layer_norm`]. Anything else needs an
//! explicit reshape.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects a 2-D tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("invalid tensor: {0}")]
    Invalid(String),
    #[error("softmax row {row} has no allowed positions")]
    DegenerateMask { row: usize },
    #[error("row {row} sums to zero and cannot be normalized")]
    ZeroRow { row: usize },
    #[error("backward needs a scalar of shape [1], got {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor does not depend on any differentiable input")]
    Detached,
    #[error("tensor belongs to a different tape")]
    ForeignVar,
    #[error("gradients already populated; call zero_grad before another backward pass")]
    GradientsConsumed,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Plain row-major array. Immutable once built, so it is freely shareable.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} must be non-empty with positive dimensions"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a `[rows.len(), cols]` matrix; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::NotMatrix {
                op,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// Handle to a differentiable tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    SoftmaxRows(usize),
    NormalizeRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    Gelu(usize),
    Relu(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Reshape(usize),
    Transpose(usize),
    MeanRows(usize),
    Sum(usize),
    Pick {
        x: usize,
        flat: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Ordered record of primitive operations and their values.
///
/// A tape is single-owner: it is `Send` but never shared while recording.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
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
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        let i = self.check(v)?;
        Ok(&self.nodes[i])
    }

    /// Value of a recorded tensor.
    ///
    /// Panics if `v` was produced by another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).expect("var from another tape").value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    /// Gradient populated by the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        let i = self.check(v).ok()?;
        self.grads[i].as_ref()
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[x.index].requires_grad;
        self.push(value, rg, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let (m, k) = av.matrix_dims("matmul")?;
        let (k2, n) = bv.matrix_dims("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let out = Tensor::new(vec![m, n], matmul_raw(&av.data, &bv.data, m, k, n))?;
        let rg = self.nodes[a.index].requires_grad || self.nodes[b.index].requires_grad;
        Ok(self.push(out, rg, Op::MatMul(a.index, b.index)))
    }

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape != bv.shape {
            return Err(TensorError::Shape {
                op,
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor {
            shape: av.shape.clone(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same_shape(a, b, "add", |x, y| x + y)?;
        let rg = self.nodes[a.index].requires_grad || self.nodes[b.index].requires_grad;
        Ok(self.push(out, rg, Op::Add(a.index, b.index)))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same_shape(a, b, "mul", |x, y| x * y)?;
        let rg = self.nodes[a.index].requires_grad || self.nodes[b.index].requires_grad;
        Ok(self.push(out, rg, Op::Mul(a.index, b.index)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v * s).collect(),
        };
        Ok(self.unary(x, out, Op::Scale(x.index, s)))
    }

    /// Row-wise softmax with max subtraction.
    ///
    /// `mask`, when given, is row-major with the same shape as `x`; `false`
    /// entries get exactly zero probability.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (rows, cols) = xv.matrix_dims("softmax_rows")?;
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(TensorError::Shape {
                    op: "softmax_rows mask",
                    lhs: xv.shape.clone(),
                    rhs: vec![m.len()],
                });
            }
        }
        let allowed = |i: usize| mask.is_none_or(|m| m[i]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let base = r * cols;
            let max = (0..cols)
                .filter(|&c| allowed(base + c))
                .map(|c| xv.data[base + c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateMask { row: r });
            }
            let mut total = 0.0;
            for c in 0..cols {
                if allowed(base + c) {
                    let e = (xv.data[base + c] - max).exp();
                    data[base + c] = e;
                    total += e;
                }
            }
            for v in &mut data[base..base + cols] {
                *v /= total;
            }
        }
        let out = Tensor {
            shape: vec![rows, cols],
            data,
        };
        Ok(self.unary(x, out, Op::SoftmaxRows(x.index)))
    }

    /// Divides every row by its sum. Rows must have a non-zero sum.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (rows, cols) = xv.matrix_dims("normalize_rows")?;
        let mut data = xv.data.clone();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let total: f64 = row.iter().sum();
            if total == 0.0 || !total.is_finite() {
                return Err(TensorError::ZeroRow { row: r });
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor {
            shape: vec![rows, cols],
            data,
        };
        Ok(self.unary(x, out, Op::NormalizeRows(x.index)))
    }

    /// Layer normalization over the last axis of a `[n, d]` tensor with
    /// per-feature `gain` and `bias` of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (rows, d) = xv.matrix_dims("layer_norm")?;
        let gv = &self.node(gain)?.value;
        let bv = &self.node(bias)?.value;
        for p in [gv, bv] {
            if p.shape != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: xv.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                data[r * d + c] = (row[c] - mean) * rstd * gv.data[c] + bv.data[c];
            }
        }
        let out = Tensor {
            shape: vec![rows, d],
            data,
        };
        let rg = [x, gain, bias]
            .iter()
            .any(|v| self.nodes[v.index].requires_grad);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                x: x.index,
                gain: gain.index,
                bias: bias.index,
                eps,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| gelu(*v)).collect(),
        };
        Ok(self.unary(x, out, Op::Gelu(x.index)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v.max(0.0)).collect(),
        };
        Ok(self.unary(x, out, Op::Relu(x.index)))
    }

    /// Gathers rows `ids` of a `[vocab, d]` table into `[ids.len(), d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.node(table)?.value;
        let (vocab, d) = tv.matrix_dims("embedding_lookup")?;
        if ids.is_empty() {
            return Err(TensorError::Invalid("embedding_lookup with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Invalid(format!(
                    "embedding id {id} out of range for table of {vocab} rows"
                )));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        Ok(self.unary(
            table,
            out,
            Op::Embedding {
                table: table.index,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let out = Tensor::new(shape, xv.data.clone()).map_err(|_| TensorError::Shape {
            op: "reshape",
            lhs: xv.shape.clone(),
            rhs: vec![xv.numel()],
        })?;
        Ok(self.unary(x, out, Op::Reshape(x.index)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (r, c) = xv.matrix_dims("transpose")?;
        let out = Tensor {
            shape: vec![c, r],
            data: transpose_raw(&xv.data, r, c),
        };
        Ok(self.unary(x, out, Op::Transpose(x.index)))
    }

    /// Mean over the spatial (row) axis: `[n, d]` to `[1, d]`.
    pub fn global_mean(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (r, c) = xv.matrix_dims("global_mean")?;
        let mut data = vec![0.0; c];
        for row in 0..r {
            for (acc, v) in data.iter_mut().zip(xv.row(row)) {
                *acc += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= r as f64);
        let out = Tensor {
            shape: vec![1, c],
            data,
        };
        Ok(self.unary(x, out, Op::MeanRows(x.index)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.node(x)?.value.data.iter().sum();
        Ok(self.unary(x, Tensor::scalar(total), Op::Sum(x.index)))
    }

    /// Selects one element (row-major flat index) as a `[1]` scalar.
    pub fn pick(&mut self, x: Var, flat: usize) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let v = *xv.data.get(flat).ok_or_else(|| {
            TensorError::Invalid(format!("pick index {flat} out of range for {:?}", xv.shape))
        })?;
        Ok(self.unary(x, Tensor::scalar(v), Op::Pick { x: x.index, flat }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows of nothing".into()))?;
        let cols = self.node(*first)?.value.matrix_dims("concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for p in parts {
            let n = self.node(*p)?;
            let (r, c) = n.value.matrix_dims("concat_rows")?;
            if c != cols {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: n.value.shape.clone(),
                });
            }
            rows += r;
            rg |= n.requires_grad;
            data.extend_from_slice(&n.value.data);
        }
        let out = Tensor {
            shape: vec![rows, cols],
            data,
        };
        Ok(self.push(out, rg, Op::ConcatRows(parts.iter().map(|p| p.index).collect())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let rows = self.node(*first)?.value.matrix_dims("concat_cols")?.0;
        let mut total_cols = 0;
        let mut rg = false;
        for p in parts {
            let n = self.node(*p)?;
            let (r, c) = n.value.matrix_dims("concat_cols")?;
            if r != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: vec![rows, total_cols],
                    rhs: n.value.shape.clone(),
                });
            }
            total_cols += c;
            rg |= n.requires_grad;
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.index].value.row(r));
            }
        }
        let out = Tensor {
            shape: vec![rows, total_cols],
            data,
        };
        Ok(self.push(out, rg, Op::ConcatCols(parts.iter().map(|p| p.index).collect())))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (r, c) = xv.matrix_dims("slice_rows")?;
        if start >= end || end > r {
            return Err(TensorError::Invalid(format!(
                "row slice {start}..{end} out of range for {:?}",
                xv.shape
            )));
        }
        let out = Tensor {
            shape: vec![end - start, c],
            data: xv.data[start * c..end * c].to_vec(),
        };
        Ok(self.unary(x, out, Op::SliceRows { x: x.index, start }))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (r, c) = xv.matrix_dims("slice_cols")?;
        if start >= end || end > c {
            return Err(TensorError::Invalid(format!(
                "column slice {start}..{end} out of range for {:?}",
                xv.shape
            )));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for row in 0..r {
            data.extend_from_slice(&xv.row(row)[start..end]);
        }
        let out = Tensor {
            shape: vec![r, end - start],
            data,
        };
        Ok(self.unary(x, out, Op::SliceCols { x: x.index, start }))
    }

    /// Clears gradients so another backward pass may run.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.consumed = false;
    }

    /// Reverse sweep from a `[1]`-shaped root.
    ///
    /// Populates the gradient of every differentiable ancestor of `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let r = self.check(root)?;
        let node = &self.nodes[r];
        if node.value.shape != [1] {
            return Err(TensorError::NotScalar(node.value.shape.clone()));
        }
        if !node.requires_grad {
            return Err(TensorError::Detached);
        }
        if self.consumed {
            return Err(TensorError::GradientsConsumed);
        }
        self.consumed = true;
        self.grads[r] = Some(Tensor::scalar(1.0));
        for i in (0..=r).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].as_ref() else {
                continue;
            };
            let contributions = self.local_grads(i, &g.data);
            for (target, delta) in contributions {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut self.grads[target] {
                    Some(acc) => {
                        for (a, d) in acc.data.iter_mut().zip(&delta) {
                            *a += d;
                        }
                    }
                    slot @ None => {
                        *slot = Some(Tensor {
                            shape: self.nodes[target].value.shape.clone(),
                            data: delta,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let out = &self.nodes[i].value;
        let val = |j: usize| &self.nodes[j].value;
        match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
                let n = val(*b).shape[1];
                let bt = transpose_raw(&val(*b).data, k, n);
                let at = transpose_raw(&val(*a).data, m, k);
                vec![
                    (*a, matmul_raw(g, &bt, m, n, k)),
                    (*b, matmul_raw(&at, g, k, m, n)),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(&val(*b).data).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(&val(*a).data).map(|(g, x)| g * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, s) => vec![(*x, g.iter().map(|v| v * s).collect())],
            Op::SoftmaxRows(x) => {
                let cols = out.cols();
                let mut dx = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = y[c] * (gr[c] - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::NormalizeRows(x) => {
                let cols = out.cols();
                let xv = val(*x);
                let mut dx = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let total: f64 = xv.row(r).iter().sum();
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = (gr[c] - dot) / total;
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = val(*x);
                let gv = &val(*gain).data;
                let d = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let gr = &g[r * d..(r + 1) * d];
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                    let gxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_g = gxhat.iter().sum::<f64>() / d as f64;
                    let mean_gx = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for c in 0..d {
                        dx[r * d + c] = rstd * (gxhat[c] - mean_g - xhat[c] * mean_gx);
                        dgain[c] += gr[c] * xhat[c];
                        dbias[c] += gr[c];
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::Gelu(x) => {
                let dx = g
                    .iter()
                    .zip(&val(*x).data)
                    .map(|(g, v)| g * gelu_grad(*v))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(&val(*x).data)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g[row * d + c];
                    }
                }
                vec![(*table, dt)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Transpose(x) => {
                let (r, c) = (out.rows(), out.cols());
                vec![(*x, transpose_raw(g, r, c))]
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    for col in 0..c {
                        dx[row * c + col] = g[col] / r as f64;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::Pick { x, flat } => {
                let mut dx = vec![0.0; val(*x).numel()];
                dx[*flat] = g[0];
                vec![(*x, dx)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let n = val(*p).numel();
                        let piece = g[offset..offset + n].to_vec();
                        offset += n;
                        (*p, piece)
                    })
                    .collect()
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut start = 0;
                parts
                    .iter()
                    .map(|p| {
                        let pv = val(*p);
                        let (r, c) = (pv.rows(), pv.cols());
                        let mut piece = Vec::with_capacity(r * c);
                        for row in 0..r {
                            piece.extend_from_slice(&g[row * total + start..row * total + start + c]);
                        }
                        start += c;
                        (*p, piece)
                    })
                    .collect()
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                vec![(*x, dx)]
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let c = xv.cols();
                let w = out.cols();
                let mut dx = vec![0.0; xv.numel()];
                for row in 0..xv.rows() {
                    dx[row * c + start..row * c + start + w].copy_from_slice(&g[row * w..(row + 1) * w]);
                }
                vec![(*x, dx)]
            }
        }
    }
}
