//! Eager tensor operations recorded on a tape for reverse-mode differentiation.
//!
//! Every primitive computes its value immediately. When at least one operand
//! requires a gradient, the primitive's operands and whatever it needs for the
//! backward pass are kept alongside the value; otherwise the node is stored as
//! a plain constant. [`Tape::backward`] walks the nodes once, newest first.

use std::borrow::Cow;
use std::sync::Arc;

use rand::Rng;

use super::gemm::{gemm, Layout};
use super::tensor::{cols_of, rows_of};
use super::{Float, NumericsError, Tensor};

/// Value written into blocked attention logits before the row softmax.
pub const MASK_FILL: Float = -1e9;

/// Lower bound applied to the argument of [`Tape::log`].
pub const LOG_FLOOR: Float = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shared `rows x cols` boolean matrix, broadcast over leading tensor dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMask {
    rows: usize,
    cols: usize,
    data: Arc<[bool]>,
}

impl BoolMask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::InvalidArgument {
                op: "mask",
                reason: format!("{rows}x{cols} mask needs {} entries, got {}", rows * cols, data.len()),
            });
        }
        Ok(Self {
            rows,
            cols,
            data: data.into(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data: Vec<bool> = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self {
            rows,
            cols,
            data: data.into(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.cols + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    /// Elementwise negation.
    pub fn not(&self) -> Self {
        let data: Vec<bool> = self.data.iter().map(|b| !b).collect();
        Self {
            rows: self.rows,
            cols: self.cols,
            data: data.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs holds one value per column and repeats down the rows.
    Row,
    /// rhs holds one value per row and repeats across the columns.
    Col,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batch: Option<usize>, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var, bcast: Broadcast },
    Mul { a: Var, b: Var, bcast: Broadcast },
    Relu { x: Var },
    Sigmoid { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Scale { x: Var, factor: Float },
    Clamp { x: Var, lo: Float, hi: Float },
    SoftmaxRows { x: Var },
    LogSoftmaxRows { x: Var },
    LogSumExpRows { x: Var },
    LayerNormRows { x: Var, gain: Var, bias: Var, normalized: Vec<Float>, inv_std: Vec<Float> },
    Dropout { x: Var, keep_scale: Vec<Float> },
    MaskedFill { x: Var, mask: BoolMask },
    SliceCols { x: Var, start: usize, end: usize },
    ConcatCols { parts: Vec<Var> },
    GatherRows { x: Var, indices: Vec<usize> },
    Transpose { x: Var },
    Reshape { x: Var },
    Sum { x: Var },
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [Float]>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<Float>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not require one.
    pub fn get(&self, v: Var) -> Option<&[Float]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Ordered record of executed primitives.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    grad_enabled: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn add_into(dst: &mut [Float], src: &[Float]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl<'p> Tape<'p> {
    /// A tape that records primitives for differentiation.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward state; every value is a constant.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Number of primitives that will be replayed by `backward`.
    pub fn record_len(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    /// Registers a borrowed tensor; it takes part in differentiation when it requires a gradient.
    pub fn input(&mut self, t: &'p Tensor) -> Var {
        let requires_grad = self.grad_enabled && t.requires_grad();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(t.into_data()),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[Float] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<Float>, op: Op, operands: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && operands.iter().any(|v| self.nodes[v.0].requires_grad);
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Matrix product. `a` may carry leading batch dimensions against a rank-2 `b`
    /// (rows are flattened), or both may be rank-3 with a shared leading batch size.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() >= 2 && sb.len() == 2 && sa[sa.len() - 1] == sb[0] {
            let (m, k, n) = (rows_of(&sa), sb[0], sb[1]);
            let mut out = vec![0.0; m * n];
            gemm(
                self.value(a),
                Layout::row_major(m, k),
                self.value(b),
                Layout::row_major(k, n),
                &mut out,
                0.0,
            );
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            return Ok(self.push(shape, out, Op::MatMul { a, b, batch: None, m, k, n }, &[a, b]));
        }
        if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1] {
            let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut out = vec![0.0; batch * m * n];
            let (va, vb) = (self.value(a), self.value(b));
            for i in 0..batch {
                gemm(
                    &va[i * m * k..(i + 1) * m * k],
                    Layout::row_major(m, k),
                    &vb[i * k * n..(i + 1) * k * n],
                    Layout::row_major(k, n),
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
            let op = Op::MatMul {
                a,
                b,
                batch: Some(batch),
                m,
                k,
                n,
            };
            return Ok(self.push(vec![batch, m, n], out, op, &[a, b]));
        }
        Err(shape_err("matmul", &sa, &sb))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        let nb: usize = sb.iter().product();
        if !sb.is_empty() && !sa.is_empty() && nb == cols_of(sa) && sb[..sb.len() - 1].iter().all(|&d| d == 1) {
            return Ok(Broadcast::Row);
        }
        if sb.len() == sa.len() && !sa.is_empty() && sb[sb.len() - 1] == 1 && sb[..sb.len() - 1] == sa[..sa.len() - 1] {
            return Ok(Broadcast::Col);
        }
        Err(shape_err(op, sa, sb))
    }

    fn zip_broadcast(&self, a: Var, b: Var, bcast: Broadcast, f: impl Fn(Float, Float) -> Float) -> Vec<Float> {
        let (va, vb) = (self.value(a), self.value(b));
        let cols = cols_of(self.shape(a));
        match bcast {
            Broadcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Row => va.iter().enumerate().map(|(i, &x)| f(x, vb[i % cols])).collect(),
            Broadcast::Col => va.iter().enumerate().map(|(i, &x)| f(x, vb[i / cols])).collect(),
        }
    }

    /// Elementwise sum; `b` may be a per-column row vector or a per-row column vector.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let bcast = self.broadcast("add", a, b)?;
        let out = self.zip_broadcast(a, b, bcast, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b, bcast }, &[a, b]))
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let bcast = self.broadcast("mul", a, b)?;
        let out = self.zip_broadcast(a, b, bcast, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b, bcast }, &[a, b]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(Float) -> Float, op: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(self.shape(x).to_vec(), out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Float::exp, Op::Exp { x })
    }

    /// Natural log of `max(x, LOG_FLOOR)`.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(LOG_FLOOR).ln(), Op::Log { x })
    }

    pub fn scale(&mut self, x: Var, factor: Float) -> Var {
        self.unary(x, |v| v * factor, Op::Scale { x, factor })
    }

    pub fn clamp(&mut self, x: Var, lo: Float, hi: Float) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    fn row_map(&mut self, x: Var, out_cols: usize, f: impl Fn(&[Float], &mut [Float]), op: Op) -> Var {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = (rows_of(&shape), cols_of(&shape));
        let mut out = vec![0.0; rows * out_cols];
        let v = self.value(x);
        for r in 0..rows {
            f(&v[r * cols..(r + 1) * cols], &mut out[r * out_cols..(r + 1) * out_cols]);
        }
        let mut out_shape = shape;
        if let Some(last) = out_shape.last_mut() {
            *last = out_cols;
        }
        self.push(out_shape, out, op, &[x])
    }

    /// Softmax over the last dimension, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let cols = cols_of(self.shape(x));
        self.row_map(x, cols, softmax_into, Op::SoftmaxRows { x })
    }

    /// `softmax_rows(masked_fill(x, blocked, MASK_FILL))` in one pass: blocked entries become
    /// exactly 0 and are never exponentiated. `blocked` covers the last two dimensions.
    pub fn masked_softmax_rows(&mut self, x: Var, blocked: &BoolMask) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let n = shape.len();
        if n < 2 || shape[n - 2] != blocked.rows || shape[n - 1] != blocked.cols {
            return Err(shape_err("masked_softmax_rows", &shape, &[blocked.rows, blocked.cols]));
        }
        let (rows, cols) = (blocked.rows, blocked.cols);
        let m = blocked.as_slice();
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for (r, (row, o)) in v.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let mrow = &m[(r % rows) * cols..(r % rows + 1) * cols];
            if mrow.iter().all(|&b| b) {
                o.fill(1.0 / cols as Float);
                continue;
            }
            let max = row.iter().zip(mrow).filter(|(_, &b)| !b).map(|(&v, _)| v).fold(Float::NEG_INFINITY, Float::max);
            let mut total = 0.0;
            for ((o, &v), &b) in o.iter_mut().zip(row).zip(mrow) {
                if !b {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            o.iter_mut().for_each(|o| *o /= total);
        }
        // The softmax backward rule only reads the output, whose blocked entries are zero.
        Ok(self.push(shape, out, Op::SoftmaxRows { x }, &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let cols = cols_of(self.shape(x));
        self.row_map(
            x,
            cols,
            |row, out| {
                let lse = log_sum_exp(row);
                out.iter_mut().zip(row).for_each(|(o, &v)| *o = v - lse);
            },
            Op::LogSoftmaxRows { x },
        )
    }

    /// `ln(sum(exp(row)))` for every row; the last dimension collapses to 1.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        self.row_map(x, 1, |row, out| out[0] = log_sum_exp(row), Op::LogSumExpRows { x })
    }

    /// Row-wise normalisation to zero mean and unit variance followed by `gain * x + bias`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: Float) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = (rows_of(&shape), cols_of(&shape));
        for p in [gain, bias] {
            if self.value(p).len() != cols {
                return Err(shape_err("layer_norm_rows", &shape, self.shape(p)));
            }
        }
        let (v, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut normalized = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<Float>() / cols as Float;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<Float>() / cols as Float;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let xh = (row[c] - mean) * inv;
                normalized[r * cols + c] = xh;
                out[r * cols + c] = g[c] * xh + b[c];
            }
        }
        let op = Op::LayerNormRows {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        Ok(self.push(shape, out, op, &[x, gain, bias]))
    }

    /// Inverted dropout: kept entries are divided by `keep_prob`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, keep_prob: Float, rng: &mut R) -> Result<Var, NumericsError> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(NumericsError::InvalidDropout(keep_prob as f64));
        }
        if keep_prob == 1.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let keep_scale: Vec<Float> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep_prob as f64 { 1.0 / keep_prob } else { 0.0 })
            .collect();
        let out = self.value(x).iter().zip(&keep_scale).map(|(a, s)| a * s).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, keep_scale }, &[x]))
    }

    /// Replaces entries where `mask` is true with `value`; the mask covers the last two dimensions.
    pub fn masked_fill(&mut self, x: Var, mask: &BoolMask, value: Float) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let n = shape.len();
        if n < 2 || shape[n - 2] != mask.rows || shape[n - 1] != mask.cols {
            return Err(shape_err("masked_fill", &shape, &[mask.rows, mask.cols]));
        }
        let plane = mask.rows * mask.cols;
        let m = mask.as_slice();
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| if m[i % plane] { value } else { v })
            .collect();
        Ok(self.push(shape, out, Op::MaskedFill { x, mask: mask.clone() }, &[x]))
    }

    /// Columns `start..end` of the last dimension.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let cols = cols_of(&shape);
        if shape.is_empty() || start >= end || end > cols {
            return Err(NumericsError::InvalidArgument {
                op: "slice_cols",
                reason: format!("range {start}..{end} invalid for shape {shape:?}"),
            });
        }
        let width = end - start;
        Ok(self.row_map(x, width, |row, out| out.copy_from_slice(&row[start..end]), Op::SliceCols { x, start, end }))
    }

    /// Concatenation along the last dimension; all leading dimensions must agree.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or_else(|| NumericsError::InvalidArgument {
            op: "concat_cols",
            reason: "no operands".into(),
        })?;
        let lead = self.shape(first).to_vec();
        if lead.is_empty() {
            return Err(shape_err("concat_cols", &lead, &[]));
        }
        let lead = &lead[..lead.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(shape_err("concat_cols", self.shape(first), s));
            }
            widths.push(cols_of(s));
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(shape, out, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    /// Selects rows of `x` (viewed as `rows x last dim`) by index; output is rank 2.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = (rows_of(&shape), cols_of(&shape));
        if shape.is_empty() {
            return Err(shape_err("gather_rows", &shape, &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::InvalidArgument {
                op: "gather_rows",
                reason: format!("row {bad} out of range for {rows} rows"),
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&v[i * cols..(i + 1) * cols]);
        }
        let op = Op::GatherRows {
            x,
            indices: indices.to_vec(),
        };
        Ok(self.push(vec![indices.len(), cols], out, op, &[x]))
    }

    /// Rows of an embedding table, one per index.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        if self.shape(table).len() != 2 {
            return Err(shape_err("embedding_lookup", self.shape(table), &[indices.len()]));
        }
        self.gather_rows(table, indices)
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let n = shape.len();
        if n < 2 {
            return Err(shape_err("transpose", &shape, &[]));
        }
        let (r, c) = (shape[n - 2], shape[n - 1]);
        let batch = shape[..n - 2].iter().product::<usize>();
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for b in 0..batch {
            let (src, dst) = (&v[b * r * c..(b + 1) * r * c], &mut out[b * r * c..(b + 1) * r * c]);
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.swap(n - 2, n - 1);
        Ok(self.push(out_shape, out, Op::Transpose { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x }, &[x]))
    }

    /// Sum of all entries as a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        self.push(Vec::new(), vec![total], Op::Sum { x }, &[x])
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<Float>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, dy: &[Float], grads: &mut [Option<Vec<Float>>]) {
        let node = &self.nodes[i];
        let y = &node.value[..];
        let cols = cols_of(&node.shape);
        let nodes = &self.nodes[..];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n } => {
                let (va, vb) = (self.value(a), self.value(b));
                match batch {
                    None => {
                        if let Some(ga) = slot(nodes, grads, a) {
                            gemm(dy, Layout::row_major(m, n), vb, Layout::transposed(k, n), ga, 1.0);
                        }
                        if let Some(gb) = slot(nodes, grads, b) {
                            gemm(va, Layout::transposed(m, k), dy, Layout::row_major(m, n), gb, 1.0);
                        }
                    }
                    Some(batch) => {
                        if let Some(ga) = slot(nodes, grads, a) {
                            for s in 0..batch {
                                gemm(
                                    &dy[s * m * n..(s + 1) * m * n],
                                    Layout::row_major(m, n),
                                    &vb[s * k * n..(s + 1) * k * n],
                                    Layout::transposed(k, n),
                                    &mut ga[s * m * k..(s + 1) * m * k],
                                    1.0,
                                );
                            }
                        }
                        if let Some(gb) = slot(nodes, grads, b) {
                            for s in 0..batch {
                                gemm(
                                    &va[s * m * k..(s + 1) * m * k],
                                    Layout::transposed(m, k),
                                    &dy[s * m * n..(s + 1) * m * n],
                                    Layout::row_major(m, n),
                                    &mut gb[s * k * n..(s + 1) * k * n],
                                    1.0,
                                );
                            }
                        }
                    }
                }
            }
            &Op::Add { a, b, bcast } => {
                if let Some(ga) = slot(nodes, grads, a) {
                    add_into(ga, dy);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    reduce_broadcast(gb, dy, bcast, cols, |d, _| d);
                }
            }
            &Op::Mul { a, b, bcast } => {
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(ga) = slot(nodes, grads, a) {
                    for (idx, g) in ga.iter_mut().enumerate() {
                        let bv = match bcast {
                            Broadcast::Same => vb[idx],
                            Broadcast::Row => vb[idx % cols],
                            Broadcast::Col => vb[idx / cols],
                        };
                        *g += dy[idx] * bv;
                    }
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    reduce_broadcast(gb, dy, bcast, cols, |d, idx| d * va[idx]);
                }
            }
            &Op::Relu { x } => {
                let vx = self.value(x);
                if let Some(g) = slot(nodes, grads, x) {
                    for ((g, &d), &v) in g.iter_mut().zip(dy).zip(vx) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            &Op::Sigmoid { x } => {
                if let Some(g) = slot(nodes, grads, x) {
                    for ((g, &d), &s) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * s * (1.0 - s);
                    }
                }
            }
            &Op::Exp { x } => {
                if let Some(g) = slot(nodes, grads, x) {
                    for ((g, &d), &e) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * e;
                    }
                }
            }
            &Op::Log { x } => {
                let vx = self.value(x);
                if let Some(g) = slot(nodes, grads, x) {
                    for ((g, &d), &v) in g.iter_mut().zip(dy).zip(vx) {
                        if v > LOG_FLOOR {
                            *g += d / v;
                        }
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(g) = slot(nodes, grads, x) {
                    for (g, &d) in g.iter_mut().zip(dy) {
                        *g += d * factor;
                    }
                }
            }
            &Op::Clamp { x, lo, hi } => {
                let vx = self.value(x);
                if let Some(g) = slot(nodes, grads, x) {
                    for ((g, &d), &v) in g.iter_mut().zip(dy).zip(vx) {
                        if v >= lo && v <= hi {
                            *g += d;
                        }
                    }
                }
            }
            &Op::SoftmaxRows { x } => {
                if let Some(g) = slot(nodes, grads, x) {
                    for ((gr, dr), yr) in g.chunks_mut(cols).zip(dy.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: Float = dr.iter().zip(yr).map(|(d, s)| d * s).sum();
                        for ((g, &d), &s) in gr.iter_mut().zip(dr).zip(yr) {
                            *g += s * (d - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmaxRows { x } => {
                if let Some(g) = slot(nodes, grads, x) {
                    for ((gr, dr), yr) in g.chunks_mut(cols).zip(dy.chunks(cols)).zip(y.chunks(cols)) {
                        let total: Float = dr.iter().sum();
                        for ((g, &d), &ly) in gr.iter_mut().zip(dr).zip(yr) {
                            *g += d - ly.exp() * total;
                        }
                    }
                }
            }
            &Op::LogSumExpRows { x } => {
                let vx = self.value(x);
                let in_cols = cols_of(self.shape(x));
                if let Some(g) = slot(nodes, grads, x) {
                    for (r, (gr, xr)) in g.chunks_mut(in_cols).zip(vx.chunks(in_cols)).enumerate() {
                        for (g, &v) in gr.iter_mut().zip(xr) {
                            *g += dy[r] * (v - y[r]).exp();
                        }
                    }
                }
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gv = self.value(*gain);
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for (dr, nr) in dy.chunks(cols).zip(normalized.chunks(cols)) {
                        for ((g, &d), &xh) in gg.iter_mut().zip(dr).zip(nr) {
                            *g += d * xh;
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for dr in dy.chunks(cols) {
                        add_into(gb, dr);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let n = cols as Float;
                    let mut dxhat = vec![0.0; cols];
                    for (r, ((gr, dr), nr)) in gx.chunks_mut(cols).zip(dy.chunks(cols)).zip(normalized.chunks(cols)).enumerate() {
                        for c in 0..cols {
                            dxhat[c] = dr[c] * gv[c];
                        }
                        let s1: Float = dxhat.iter().sum();
                        let s2: Float = dxhat.iter().zip(nr).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / n;
                        for c in 0..cols {
                            gr[c] += scale * (n * dxhat[c] - s1 - nr[c] * s2);
                        }
                    }
                }
            }
            Op::Dropout { x, keep_scale } => {
                if let Some(g) = slot(nodes, grads, *x) {
                    for ((g, &d), &s) in g.iter_mut().zip(dy).zip(keep_scale) {
                        *g += d * s;
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                let plane = mask.rows * mask.cols;
                let m = mask.as_slice();
                if let Some(g) = slot(nodes, grads, *x) {
                    for (idx, (g, &d)) in g.iter_mut().zip(dy).enumerate() {
                        if !m[idx % plane] {
                            *g += d;
                        }
                    }
                }
            }
            &Op::SliceCols { x, start, end } => {
                let in_cols = cols_of(self.shape(x));
                let width = end - start;
                if let Some(g) = slot(nodes, grads, x) {
                    for (gr, dr) in g.chunks_mut(in_cols).zip(dy.chunks(width)) {
                        add_into(&mut gr[start..end], dr);
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let w = cols_of(self.shape(p));
                    if let Some(g) = slot(nodes, grads, p) {
                        for (gr, dr) in g.chunks_mut(w).zip(dy.chunks(cols)) {
                            add_into(gr, &dr[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, indices } => {
                if let Some(g) = slot(nodes, grads, *x) {
                    for (j, &row) in indices.iter().enumerate() {
                        add_into(&mut g[row * cols..(row + 1) * cols], &dy[j * cols..(j + 1) * cols]);
                    }
                }
            }
            &Op::Transpose { x } => {
                let s = self.shape(x);
                let n = s.len();
                let (r, c) = (s[n - 2], s[n - 1]);
                if let Some(g) = slot(nodes, grads, x) {
                    for b in 0..g.len() / (r * c).max(1) {
                        let (gb, db) = (&mut g[b * r * c..(b + 1) * r * c], &dy[b * r * c..(b + 1) * r * c]);
                        for i in 0..r {
                            for j in 0..c {
                                gb[i * c + j] += db[j * r + i];
                            }
                        }
                    }
                }
            }
            &Op::Reshape { x } => {
                if let Some(g) = slot(nodes, grads, x) {
                    add_into(g, dy);
                }
            }
            &Op::Sum { x } => {
                if let Some(g) = slot(nodes, grads, x) {
                    g.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
        }
    }
}

/// Gradient buffer for an operand, or `None` when it needs no gradient.
fn slot<'g>(nodes: &[Node<'_>], grads: &'g mut [Option<Vec<Float>>], v: Var) -> Option<&'g mut Vec<Float>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

fn reduce_broadcast(gb: &mut [Float], dy: &[Float], bcast: Broadcast, cols: usize, f: impl Fn(Float, usize) -> Float) {
    match bcast {
        Broadcast::Same => gb.iter_mut().enumerate().for_each(|(i, g)| *g += f(dy[i], i)),
        Broadcast::Row => dy.iter().enumerate().for_each(|(i, &d)| gb[i % cols] += f(d, i)),
        Broadcast::Col => dy.iter().enumerate().for_each(|(i, &d)| gb[i / cols] += f(d, i)),
    }
}

pub fn sigmoid(v: Float) -> Float {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln(sum(exp(row)))` with the row maximum factored out.
pub fn log_sum_exp(row: &[Float]) -> Float {
    let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    if max == Float::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<Float>().ln()
}

/// Writes the softmax of `row` into `out`.
pub fn softmax_into(row: &[Float], out: &mut [Float]) {
    let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}
