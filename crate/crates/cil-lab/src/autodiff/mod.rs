//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value,
//! a gradient buffer and the recipe needed for the backward pass. Tensors
//! are at most two-dimensional (scalars are `1x1`), which covers everything
//! the losses and the MLP require. The tape is rebuilt from scratch on every
//! training step; there is no graph reuse and no sharing across threads.
//!
//! Forward evaluation is eager and deterministic: identical inputs produce
//! bit-identical outputs. Every node's values are checked for finiteness as
//! it is produced, so numerical blow-ups surface as [`Error::Numeric`] at
//! the op that caused them rather than as `NaN`s downstream.

mod check;

pub use check::grad_check;

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Handle to a tensor on a [`Graph`]. Cheap to copy; the actual buffers live
/// in the graph node it points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffTensor {
    id: usize,
    rows: usize,
    cols: usize,
}

impl DiffTensor {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    fn len(&self) -> usize {
        self.rows * self.cols
    }

    fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

/// One recorded operation. Input tensors are node indices, which are always
/// smaller than the node's own index, so the tape is topologically ordered
/// by construction.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    /// `[n x d] + [1 x d]`, the bias add.
    AddRowBroadcast { a: usize, b: usize },
    /// `[n x d] - [1 x d]`, row centering.
    SubRowBroadcast { a: usize, b: usize },
    /// `[n x d] / [1 x d]`, per-column rescale.
    DivRowBroadcast { a: usize, b: usize },
    /// `[n x d] / [n x 1]`, per-row rescale.
    DivColBroadcast { a: usize, b: usize },
    ScaleConst { a: usize, c: f64 },
    AddConst { a: usize },
    /// Multiply every entry of `a` by the learnable scalar node `s`.
    ScaleByScalar { a: usize, s: usize },
    Relu { a: usize },
    Sqrt { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    RowSum { a: usize },
    ColSum { a: usize },
    ColMean { a: usize },
    GatherRows { a: usize, indices: Vec<usize> },
    SliceCols { a: usize, start: usize },
    /// Mean over rows of `-log softmax(logits)[label]`; caches the softmax.
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Mean over rows of `-sum_c t_c * log softmax(logits)_c` against fixed
    /// target rows `t`; caches the softmax.
    SoftCrossEntropy {
        logits: usize,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
}

/// The computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Creates a differentiable leaf from a matrix.
    pub fn leaf(&mut self, m: &Mat) -> Result<DiffTensor> {
        self.push(Op::Leaf, m.rows(), m.cols(), m.data().to_vec())
    }

    /// Creates a leaf from raw parts (used for parameters stored as flat
    /// vectors, e.g. biases and the head scale).
    pub fn leaf_from_parts(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<DiffTensor> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "leaf",
                left: format!("{rows}x{cols}"),
                right: format!("len {}", data.len()),
            });
        }
        self.push(Op::Leaf, rows, cols, data)
    }

    /// A constant scalar. Differentiable in the trivial sense: its gradient
    /// buffer exists, so it can stand in for an empty loss term.
    pub fn scalar_constant(&mut self, v: f64) -> Result<DiffTensor> {
        self.push(Op::Leaf, 1, 1, vec![v])
    }

    pub fn value(&self, t: DiffTensor) -> &[f64] {
        &self.nodes[t.id].value
    }

    pub fn grad(&self, t: DiffTensor) -> &[f64] {
        &self.nodes[t.id].grad
    }

    /// The value of a `1x1` tensor.
    pub fn scalar(&self, t: DiffTensor) -> f64 {
        debug_assert!(t.is_scalar());
        self.nodes[t.id].value[0]
    }

    pub fn to_mat(&self, t: DiffTensor) -> Mat {
        Mat::from_vec(t.rows, t.cols, self.nodes[t.id].value.clone())
            .expect("node buffers are consistent")
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Result<DiffTensor> {
        debug_assert_eq!(value.len(), rows * cols);
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                op: op_name(&op),
                message: "non-finite value in forward evaluation".into(),
            });
        }
        let id = self.nodes.len();
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { op, rows, cols, value, grad });
        Ok(DiffTensor { id, rows, cols })
    }

    fn val(&self, id: usize) -> &[f64] {
        &self.nodes[id].value
    }

    // ---- elementwise and broadcast arithmetic ------------------------------

    pub fn add(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.same_shape("add", a, b)?;
        let v = zip_map(self.val(a.id), self.val(b.id), |x, y| x + y);
        self.push(Op::Add { a: a.id, b: b.id }, a.rows, a.cols, v)
    }

    pub fn sub(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.same_shape("sub", a, b)?;
        let v = zip_map(self.val(a.id), self.val(b.id), |x, y| x - y);
        self.push(Op::Sub { a: a.id, b: b.id }, a.rows, a.cols, v)
    }

    pub fn mul(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.same_shape("mul", a, b)?;
        let v = zip_map(self.val(a.id), self.val(b.id), |x, y| x * y);
        self.push(Op::Mul { a: a.id, b: b.id }, a.rows, a.cols, v)
    }

    pub fn div(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.same_shape("div", a, b)?;
        let v = zip_map(self.val(a.id), self.val(b.id), |x, y| x / y);
        self.push(Op::Div { a: a.id, b: b.id }, a.rows, a.cols, v)
    }

    /// Adds a `1 x d` row vector to every row of an `n x d` matrix.
    pub fn add_row_broadcast(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.row_broadcastable("add_row_broadcast", a, b)?;
        let v = row_broadcast(self.val(a.id), self.val(b.id), a.cols, |x, y| x + y);
        self.push(Op::AddRowBroadcast { a: a.id, b: b.id }, a.rows, a.cols, v)
    }

    pub fn sub_row_broadcast(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.row_broadcastable("sub_row_broadcast", a, b)?;
        let v = row_broadcast(self.val(a.id), self.val(b.id), a.cols, |x, y| x - y);
        self.push(Op::SubRowBroadcast { a: a.id, b: b.id }, a.rows, a.cols, v)
    }

    pub fn div_row_broadcast(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.row_broadcastable("div_row_broadcast", a, b)?;
        let v = row_broadcast(self.val(a.id), self.val(b.id), a.cols, |x, y| x / y);
        self.push(Op::DivRowBroadcast { a: a.id, b: b.id }, a.rows, a.cols, v)
    }

    /// Divides each row `i` of an `n x d` matrix by the scalar `b[i]` of an
    /// `n x 1` column.
    pub fn div_col_broadcast(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        if b.rows != a.rows || b.cols != 1 {
            return Err(Error::Dimension {
                op: "div_col_broadcast",
                left: a.shape_string(),
                right: b.shape_string(),
            });
        }
        let bv = self.val(b.id);
        let av = self.val(a.id);
        let mut v = Vec::with_capacity(av.len());
        for i in 0..a.rows {
            for j in 0..a.cols {
                v.push(av[i * a.cols + j] / bv[i]);
            }
        }
        self.push(Op::DivColBroadcast { a: a.id, b: b.id }, a.rows, a.cols, v)
    }

    pub fn scale(&mut self, a: DiffTensor, c: f64) -> Result<DiffTensor> {
        let v = self.val(a.id).iter().map(|x| x * c).collect();
        self.push(Op::ScaleConst { a: a.id, c }, a.rows, a.cols, v)
    }

    pub fn add_const(&mut self, a: DiffTensor, c: f64) -> Result<DiffTensor> {
        let v = self.val(a.id).iter().map(|x| x + c).collect();
        self.push(Op::AddConst { a: a.id }, a.rows, a.cols, v)
    }

    /// Multiplies every entry of `a` by the `1x1` tensor `s`; the gradient
    /// reaches both `a` and `s`.
    pub fn scale_by_scalar(&mut self, a: DiffTensor, s: DiffTensor) -> Result<DiffTensor> {
        if !s.is_scalar() {
            return Err(Error::Dimension {
                op: "scale_by_scalar",
                left: a.shape_string(),
                right: s.shape_string(),
            });
        }
        let sv = self.val(s.id)[0];
        let v = self.val(a.id).iter().map(|x| x * sv).collect();
        self.push(Op::ScaleByScalar { a: a.id, s: s.id }, a.rows, a.cols, v)
    }

    // ---- structural ops ----------------------------------------------------

    pub fn matmul(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        if a.cols != b.rows {
            return Err(Error::Dimension {
                op: "matmul",
                left: a.shape_string(),
                right: b.shape_string(),
            });
        }
        let v = matmul_raw(self.val(a.id), self.val(b.id), a.rows, a.cols, b.cols);
        self.push(Op::MatMul { a: a.id, b: b.id }, a.rows, b.cols, v)
    }

    pub fn transpose(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let av = self.val(a.id);
        let mut v = vec![0.0; av.len()];
        for i in 0..a.rows {
            for j in 0..a.cols {
                v[j * a.rows + i] = av[i * a.cols + j];
            }
        }
        self.push(Op::Transpose { a: a.id }, a.cols, a.rows, v)
    }

    pub fn gather_rows(&mut self, a: DiffTensor, indices: &[usize]) -> Result<DiffTensor> {
        for &i in indices {
            if i >= a.rows {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    bound: a.rows,
                });
            }
        }
        let av = self.val(a.id);
        let mut v = Vec::with_capacity(indices.len() * a.cols);
        for &i in indices {
            v.extend_from_slice(&av[i * a.cols..(i + 1) * a.cols]);
        }
        self.push(
            Op::GatherRows { a: a.id, indices: indices.to_vec() },
            indices.len(),
            a.cols,
            v,
        )
    }

    /// Keeps columns `start..end`.
    pub fn slice_cols(&mut self, a: DiffTensor, start: usize, end: usize) -> Result<DiffTensor> {
        if start >= end || end > a.cols {
            return Err(Error::Contract {
                op: "slice_cols",
                message: format!("range {start}..{end} invalid for {} columns", a.cols),
            });
        }
        let av = self.val(a.id);
        let w = end - start;
        let mut v = Vec::with_capacity(a.rows * w);
        for i in 0..a.rows {
            v.extend_from_slice(&av[i * a.cols + start..i * a.cols + end]);
        }
        self.push(Op::SliceCols { a: a.id, start }, a.rows, w, v)
    }

    // ---- nonlinearities and reductions --------------------------------------

    /// Elementwise `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let v = self.val(a.id).iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu { a: a.id }, a.rows, a.cols, v)
    }

    pub fn sqrt(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let v = self.val(a.id).iter().map(|x| x.sqrt()).collect();
        self.push(Op::Sqrt { a: a.id }, a.rows, a.cols, v)
    }

    pub fn sum(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let v = self.val(a.id).iter().sum();
        self.push(Op::Sum { a: a.id }, 1, 1, vec![v])
    }

    pub fn mean(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let v = self.val(a.id).iter().sum::<f64>() / a.len() as f64;
        self.push(Op::Mean { a: a.id }, 1, 1, vec![v])
    }

    /// `n x d -> n x 1`.
    pub fn row_sum(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let av = self.val(a.id);
        let v = (0..a.rows)
            .map(|i| av[i * a.cols..(i + 1) * a.cols].iter().sum())
            .collect();
        self.push(Op::RowSum { a: a.id }, a.rows, 1, v)
    }

    /// `n x d -> 1 x d`.
    pub fn col_sum(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let av = self.val(a.id);
        let mut v = vec![0.0; a.cols];
        for i in 0..a.rows {
            for (j, out) in v.iter_mut().enumerate() {
                *out += av[i * a.cols + j];
            }
        }
        self.push(Op::ColSum { a: a.id }, 1, a.cols, v)
    }

    /// `n x d -> 1 x d`.
    pub fn col_mean(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let av = self.val(a.id);
        let n = a.rows as f64;
        let mut v = vec![0.0; a.cols];
        for i in 0..a.rows {
            for (j, out) in v.iter_mut().enumerate() {
                *out += av[i * a.cols + j];
            }
        }
        for out in &mut v {
            *out /= n;
        }
        self.push(Op::ColMean { a: a.id }, 1, a.cols, v)
    }

    // ---- classification losses ----------------------------------------------

    /// Mean over rows of `-log softmax(logits)[label]`, stabilized by row-max
    /// subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: DiffTensor, labels: &[usize]) -> Result<DiffTensor> {
        if labels.len() != logits.rows {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                left: logits.shape_string(),
                right: format!("{} labels", labels.len()),
            });
        }
        if logits.rows == 0 {
            return Err(Error::Contract {
                op: "softmax_cross_entropy",
                message: "empty batch".into(),
            });
        }
        for &l in labels {
            if l >= logits.cols {
                return Err(Error::Index {
                    op: "softmax_cross_entropy",
                    index: l,
                    bound: logits.cols,
                });
            }
        }
        let (probs, log_probs) = softmax_rows(self.val(logits.id), logits.rows, logits.cols);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            loss -= log_probs[i * logits.cols + l];
        }
        loss /= logits.rows as f64;
        self.push(
            Op::SoftmaxCrossEntropy {
                logits: logits.id,
                labels: labels.to_vec(),
                probs,
            },
            1,
            1,
            vec![loss],
        )
    }

    /// Mean over rows of `-sum_c targets[c] * log softmax(logits)_c`, with
    /// constant (non-differentiated) target rows.
    pub fn soft_cross_entropy(&mut self, logits: DiffTensor, targets: &Mat) -> Result<DiffTensor> {
        if targets.rows() != logits.rows || targets.cols() != logits.cols {
            return Err(Error::Dimension {
                op: "soft_cross_entropy",
                left: logits.shape_string(),
                right: format!("{}x{}", targets.rows(), targets.cols()),
            });
        }
        let (probs, log_probs) = softmax_rows(self.val(logits.id), logits.rows, logits.cols);
        let mut loss = 0.0;
        for (t, lp) in targets.data().iter().zip(&log_probs) {
            loss -= t * lp;
        }
        loss /= logits.rows as f64;
        self.push(
            Op::SoftCrossEntropy {
                logits: logits.id,
                targets: targets.data().to_vec(),
                probs,
            },
            1,
            1,
            vec![loss],
        )
    }

    // ---- backward ------------------------------------------------------------

    /// Populates the gradient of every node reachable from `loss`. Gradients
    /// accumulate additively across fan-out; a second call on the same graph
    /// keeps accumulating, so use a fresh graph per step.
    // Index loops here borrow value and grad buffers of possibly-aliasing
    // nodes (e.g. mul(x, x)) in sequence; iterator zips cannot express that.
    #[allow(clippy::needless_range_loop)]
    pub fn backward(&mut self, loss: DiffTensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::Contract {
                op: "backward",
                message: format!("loss must be 1x1, got {}", loss.shape_string()),
            });
        }
        self.nodes[loss.id].grad[0] += 1.0;
        for id in (0..=loss.id).rev() {
            // Split off the node so its cached fields and the input nodes'
            // gradient buffers can be borrowed simultaneously.
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &rest[0];
            let go = &node.grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (n, k, m) = (node.rows, before[*a].cols, node.cols);
                    // dA += G * B^T
                    {
                        let bv = &before[*b].value;
                        let mut da = vec![0.0; n * k];
                        for i in 0..n {
                            for j in 0..m {
                                let g = go[i * m + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    da[i * k + p] += g * bv[p * m + j];
                                }
                            }
                        }
                        accumulate(&mut before[*a].grad, &da);
                    }
                    // dB += A^T * G
                    {
                        let av = &before[*a].value;
                        let mut db = vec![0.0; k * m];
                        for i in 0..n {
                            for p in 0..k {
                                let x = av[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for j in 0..m {
                                    db[p * m + j] += x * go[i * m + j];
                                }
                            }
                        }
                        accumulate(&mut before[*b].grad, &db);
                    }
                }
                Op::Transpose { a } => {
                    let (r, c) = (node.rows, node.cols);
                    let ga = &mut before[*a].grad;
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += go[i * c + j];
                        }
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut before[*a].grad, go);
                    accumulate(&mut before[*b].grad, go);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut before[*a].grad, go);
                    for (g, &x) in before[*b].grad.iter_mut().zip(go) {
                        *g -= x;
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    for idx in 0..go.len() {
                        let bv = before[b].value[idx];
                        before[a].grad[idx] += go[idx] * bv;
                    }
                    for idx in 0..go.len() {
                        let av = before[a].value[idx];
                        before[b].grad[idx] += go[idx] * av;
                    }
                }
                Op::Div { a, b } => {
                    let (a, b) = (*a, *b);
                    for idx in 0..go.len() {
                        let bv = before[b].value[idx];
                        before[a].grad[idx] += go[idx] / bv;
                    }
                    for idx in 0..go.len() {
                        let av = before[a].value[idx];
                        let bv = before[b].value[idx];
                        before[b].grad[idx] -= go[idx] * av / (bv * bv);
                    }
                }
                Op::AddRowBroadcast { a, b } => {
                    accumulate(&mut before[*a].grad, go);
                    let cols = node.cols;
                    let gb = &mut before[*b].grad;
                    for i in 0..node.rows {
                        for j in 0..cols {
                            gb[j] += go[i * cols + j];
                        }
                    }
                }
                Op::SubRowBroadcast { a, b } => {
                    accumulate(&mut before[*a].grad, go);
                    let cols = node.cols;
                    let gb = &mut before[*b].grad;
                    for i in 0..node.rows {
                        for j in 0..cols {
                            gb[j] -= go[i * cols + j];
                        }
                    }
                }
                Op::DivRowBroadcast { a, b } => {
                    let (a, b) = (*a, *b);
                    let cols = node.cols;
                    for i in 0..node.rows {
                        for j in 0..cols {
                            let bv = before[b].value[j];
                            before[a].grad[i * cols + j] += go[i * cols + j] / bv;
                        }
                    }
                    for i in 0..node.rows {
                        for j in 0..cols {
                            let av = before[a].value[i * cols + j];
                            let bv = before[b].value[j];
                            before[b].grad[j] -= go[i * cols + j] * av / (bv * bv);
                        }
                    }
                }
                Op::DivColBroadcast { a, b } => {
                    let (a, b) = (*a, *b);
                    let cols = node.cols;
                    for i in 0..node.rows {
                        let bv = before[b].value[i];
                        for j in 0..cols {
                            before[a].grad[i * cols + j] += go[i * cols + j] / bv;
                        }
                    }
                    for i in 0..node.rows {
                        let bv = before[b].value[i];
                        let mut acc = 0.0;
                        for j in 0..cols {
                            let av = before[a].value[i * cols + j];
                            acc += go[i * cols + j] * av;
                        }
                        before[b].grad[i] -= acc / (bv * bv);
                    }
                }
                Op::ScaleConst { a, c } => {
                    for (g, &x) in before[*a].grad.iter_mut().zip(go) {
                        *g += c * x;
                    }
                }
                Op::AddConst { a } => {
                    accumulate(&mut before[*a].grad, go);
                }
                Op::ScaleByScalar { a, s } => {
                    let (a, s) = (*a, *s);
                    let sv = before[s].value[0];
                    for idx in 0..go.len() {
                        before[a].grad[idx] += go[idx] * sv;
                    }
                    let mut acc = 0.0;
                    for idx in 0..go.len() {
                        acc += go[idx] * before[a].value[idx];
                    }
                    before[s].grad[0] += acc;
                }
                Op::Relu { a } => {
                    let a = *a;
                    for idx in 0..go.len() {
                        if before[a].value[idx] > 0.0 {
                            before[a].grad[idx] += go[idx];
                        }
                    }
                }
                Op::Sqrt { a } => {
                    let a = *a;
                    for idx in 0..go.len() {
                        let out = node.value[idx];
                        before[a].grad[idx] += go[idx] / (2.0 * out);
                    }
                }
                Op::Sum { a } => {
                    let g = go[0];
                    for x in before[*a].grad.iter_mut() {
                        *x += g;
                    }
                }
                Op::Mean { a } => {
                    let g = go[0] / before[*a].value.len() as f64;
                    for x in before[*a].grad.iter_mut() {
                        *x += g;
                    }
                }
                Op::RowSum { a } => {
                    let cols = before[*a].cols;
                    let ga = &mut before[*a].grad;
                    for i in 0..node.rows {
                        for j in 0..cols {
                            ga[i * cols + j] += go[i];
                        }
                    }
                }
                Op::ColSum { a } => {
                    let rows = before[*a].rows;
                    let cols = node.cols;
                    let ga = &mut before[*a].grad;
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * cols + j] += go[j];
                        }
                    }
                }
                Op::ColMean { a } => {
                    let rows = before[*a].rows;
                    let cols = node.cols;
                    let scale = 1.0 / rows as f64;
                    let ga = &mut before[*a].grad;
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * cols + j] += go[j] * scale;
                        }
                    }
                }
                Op::GatherRows { a, indices } => {
                    let cols = node.cols;
                    let ga = &mut before[*a].grad;
                    for (dst, &src) in indices.iter().enumerate() {
                        for j in 0..cols {
                            ga[src * cols + j] += go[dst * cols + j];
                        }
                    }
                }
                Op::SliceCols { a, start } => {
                    let acols = before[*a].cols;
                    let w = node.cols;
                    let ga = &mut before[*a].grad;
                    for i in 0..node.rows {
                        for j in 0..w {
                            ga[i * acols + start + j] += go[i * w + j];
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let cols = before[*logits].cols;
                    let n = labels.len() as f64;
                    let g = go[0] / n;
                    let gl = &mut before[*logits].grad;
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..cols {
                            let indicator = if j == l { 1.0 } else { 0.0 };
                            gl[i * cols + j] += g * (probs[i * cols + j] - indicator);
                        }
                    }
                }
                Op::SoftCrossEntropy { logits, targets, probs } => {
                    let rows = before[*logits].rows;
                    let cols = before[*logits].cols;
                    let g = go[0] / rows as f64;
                    let gl = &mut before[*logits].grad;
                    for i in 0..rows {
                        let t_sum: f64 = targets[i * cols..(i + 1) * cols].iter().sum();
                        for j in 0..cols {
                            gl[i * cols + j] +=
                                g * (t_sum * probs[i * cols + j] - targets[i * cols + j]);
                        }
                    }
                }
            }
        }
        for node in &self.nodes {
            if !node.grad.iter().all(|g| g.is_finite()) {
                return Err(Error::Numeric {
                    op: "backward",
                    message: "non-finite gradient".into(),
                });
            }
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: DiffTensor, b: DiffTensor) -> Result<()> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(Error::Dimension {
                op,
                left: a.shape_string(),
                right: b.shape_string(),
            });
        }
        Ok(())
    }

    fn row_broadcastable(&self, op: &'static str, a: DiffTensor, b: DiffTensor) -> Result<()> {
        if b.rows != 1 || b.cols != a.cols {
            return Err(Error::Dimension {
                op,
                left: a.shape_string(),
                right: b.shape_string(),
            });
        }
        Ok(())
    }
}

// ---- composite helpers ------------------------------------------------------

/// Per-column unbiased standard deviation (divisor `n - 1`) of an `n x d`
/// tensor, as a differentiable `1 x d` tensor. Requires `n >= 2`.
pub fn col_std(g: &mut Graph, a: DiffTensor) -> Result<DiffTensor> {
    if a.rows() < 2 {
        return Err(Error::InsufficientSamples {
            op: "col_std",
            required: 2,
            got: a.rows(),
        });
    }
    let mean = g.col_mean(a)?;
    let centered = g.sub_row_broadcast(a, mean)?;
    let sq = g.mul(centered, centered)?;
    let ssq = g.col_sum(sq)?;
    let var = g.scale(ssq, 1.0 / (a.rows() - 1) as f64)?;
    g.sqrt(var)
}

/// Row-wise cosine similarity of two `n x d` tensors as an `n x 1` tensor.
/// The denominator is guarded by `eps` against zero-norm rows.
pub fn cosine_rows(g: &mut Graph, a: DiffTensor, b: DiffTensor, eps: f64) -> Result<DiffTensor> {
    let prod = g.mul(a, b)?;
    let dot = g.row_sum(prod)?;
    let aa = g.mul(a, a)?;
    let na = g.row_sum(aa)?;
    let na = g.sqrt(na)?;
    let bb = g.mul(b, b)?;
    let nb = g.row_sum(bb)?;
    let nb = g.sqrt(nb)?;
    let denom = g.mul(na, nb)?;
    let denom = g.add_const(denom, eps)?;
    g.div(dot, denom)
}

/// L2-normalizes each row of an `n x d` tensor, guarding zero rows with `eps`.
pub fn l2_normalize_rows(g: &mut Graph, a: DiffTensor, eps: f64) -> Result<DiffTensor> {
    let sq = g.mul(a, a)?;
    let norms_sq = g.row_sum(sq)?;
    let norms = g.sqrt(norms_sq)?;
    let norms = g.add_const(norms, eps)?;
    g.div_col_broadcast(a, norms)
}

// ---- raw kernels --------------------------------------------------------------

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn row_broadcast(a: &[f64], b: &[f64], cols: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.chunks(cols)
        .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| f(x, y)))
        .collect()
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i * m + j] += x * b[p * m + j];
            }
        }
    }
    out
}

/// Row-stabilized softmax; returns `(probs, log_probs)`.
fn softmax_rows(logits: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut probs = vec![0.0; logits.len()];
    let mut log_probs = vec![0.0; logits.len()];
    for i in 0..rows {
        let row = &logits[i * cols..(i + 1) * cols];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for &x in row {
            z += (x - max).exp();
        }
        let log_z = z.ln();
        for (j, &x) in row.iter().enumerate() {
            log_probs[i * cols + j] = x - max - log_z;
            probs[i * cols + j] = log_probs[i * cols + j].exp();
        }
    }
    (probs, log_probs)
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Div { .. } => "div",
        Op::AddRowBroadcast { .. } => "add_row_broadcast",
        Op::SubRowBroadcast { .. } => "sub_row_broadcast",
        Op::DivRowBroadcast { .. } => "div_row_broadcast",
        Op::DivColBroadcast { .. } => "div_col_broadcast",
        Op::ScaleConst { .. } => "scale",
        Op::AddConst { .. } => "add_const",
        Op::ScaleByScalar { .. } => "scale_by_scalar",
        Op::Relu { .. } => "relu",
        Op::Sqrt { .. } => "sqrt",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::RowSum { .. } => "row_sum",
        Op::ColSum { .. } => "col_sum",
        Op::ColMean { .. } => "col_mean",
        Op::GatherRows { .. } => "gather_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Mat {
        Mat::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let mut g = Graph::new();
        let i = g.leaf(&Mat::identity(2)).unwrap();
        let a = g.leaf(&mat(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let mut g = Graph::new();
        let a = g.leaf(&mat(1, 2, &[1.0, 2.0])).unwrap();
        let b = g.leaf(&mat(2, 1, &[3.0, 4.0])).unwrap();
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(&Mat::zeros(2, 3)).unwrap();
        let b = g.leaf(&Mat::zeros(2, 3)).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3"), "{err}");
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_b_transposed() {
        // d sum(A B) / dA = 1 * B^T
        let mut g = Graph::new();
        let a = g.leaf(&mat(2, 2, &[0.5, -1.0, 2.0, 0.0])).unwrap();
        let b = g.leaf(&mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let y = g.matmul(a, b).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        // ones(2x3) * B^T: each row is [1+2+3, 4+5+6] = [6, 15]
        assert_eq!(g.grad(a), &[6.0, 15.0, 6.0, 15.0]);
    }

    #[test]
    fn relu_forward_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(&mat(1, 3, &[-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);

        let mut g = Graph::new();
        let x = g.leaf(&mat(1, 2, &[3.0, -3.0])).unwrap();
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[1.0, 0.0]);
    }

    #[test]
    fn relu_all_negative_gives_zero_output_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(&mat(1, 3, &[-5.0, -0.1, -2.0])).unwrap();
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 0.0]);
        assert_eq!(g.grad(x), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.leaf(&mat(1, 2, &[0.0, 0.0])).unwrap();
        let loss = g.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((g.scalar(loss) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_stable_under_huge_logits() {
        let mut g = Graph::new();
        let logits = g.leaf(&mat(1, 2, &[1000.0, 0.0])).unwrap();
        let loss = g.softmax_cross_entropy(logits, &[0]).unwrap();
        let v = g.scalar(loss);
        assert!(v.is_finite());
        assert!(v.abs() < 1e-12, "loss {v}");
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let logits = g.leaf(&mat(1, 2, &[0.0, 0.0])).unwrap();
        let err = g.softmax_cross_entropy(logits, &[2]).unwrap_err();
        assert!(matches!(err, Error::Index { .. }));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let w = g.leaf(&mat(1, 3, &[5.0, -2.0, 0.3])).unwrap();
        let loss = g.sum(w).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic() {
        let mut g = Graph::new();
        let w = g.leaf(&mat(1, 2, &[1.0, 2.0])).unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w), &[2.0, 4.0]);
    }

    #[test]
    fn backward_diamond_fanout_sums_both_paths() {
        // loss = sum(w + w*w): dw = 1 + 2w, checked against the hand chain
        // rule on the two-consumer graph.
        let mut g = Graph::new();
        let w = g.leaf(&mat(1, 2, &[3.0, -1.0])).unwrap();
        let sq = g.mul(w, w).unwrap();
        let both = g.add(w, sq).unwrap();
        let loss = g.sum(both).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w), &[7.0, -1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(&mat(1, 2, &[1.0, 2.0])).unwrap();
        let err = g.backward(w).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }));
    }

    #[test]
    fn gradient_accumulation_equals_sum_of_single_paths() {
        // Two consumers of x: loss = sum(2x) + mean(x). Gradients must be
        // the sum of each consumer's standalone gradient.
        let data = mat(1, 4, &[0.4, -1.2, 2.0, 0.0]);
        let run = |use_a: bool, use_b: bool| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.leaf(&data).unwrap();
            let mut parts = Vec::new();
            if use_a {
                let two_x = g.scale(x, 2.0).unwrap();
                parts.push(g.sum(two_x).unwrap());
            }
            if use_b {
                parts.push(g.mean(x).unwrap());
            }
            let mut loss = parts[0];
            for p in &parts[1..] {
                loss = g.add(loss, *p).unwrap();
            }
            g.backward(loss).unwrap();
            g.grad(x).to_vec()
        };
        let both = run(true, true);
        let only_a = run(true, false);
        let only_b = run(false, true);
        for i in 0..4 {
            assert!((both[i] - (only_a[i] + only_b[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let a = g.leaf(&mat(2, 2, &[0.1, 0.2, 0.3, 0.4])).unwrap();
            let b = g.leaf(&mat(2, 2, &[0.9, 0.8, 0.7, 0.6])).unwrap();
            let c = g.matmul(a, b).unwrap();
            let d = g.relu(c).unwrap();
            let e = g.mean(d).unwrap();
            g.scalar(e).to_bits()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut g = Graph::new();
        let x = g.leaf(&mat(1, 1, &[-1.0])).unwrap();
        let err = g.sqrt(x).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn slice_cols_gradient_stays_in_slice() {
        let mut g = Graph::new();
        let x = g.leaf(&mat(1, 4, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let s = g.slice_cols(x, 1, 3).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn cosine_rows_basics() {
        let mut g = Graph::new();
        let a = g.leaf(&mat(3, 2, &[1.0, 0.0, 1.0, 0.0, 2.0, 0.0])).unwrap();
        let b = g.leaf(&mat(3, 2, &[1.0, 0.0, 0.0, 1.0, -2.0, 0.0])).unwrap();
        let cos = cosine_rows(&mut g, a, b, 1e-12).unwrap();
        let v = g.value(cos);
        assert!((v[0] - 1.0).abs() < 1e-9);
        assert!(v[1].abs() < 1e-9);
        assert!((v[2] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn l2_normalize_rows_unit_norm() {
        let mut g = Graph::new();
        let a = g.leaf(&mat(2, 2, &[3.0, 4.0, 0.0, 2.0])).unwrap();
        let n = l2_normalize_rows(&mut g, a, 1e-12).unwrap();
        let v = g.value(n);
        assert!((v[0].hypot(v[1]) - 1.0).abs() < 1e-9);
        assert!((v[2].hypot(v[3]) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn col_std_matches_hand_value() {
        // Column [1, 3]: mean 2, unbiased var 2, std sqrt(2).
        let mut g = Graph::new();
        let a = g.leaf(&mat(2, 1, &[1.0, 3.0])).unwrap();
        let s = col_std(&mut g, a).unwrap();
        assert!((g.value(s)[0] - 2.0f64.sqrt()).abs() < 1e-12);
    }
}
