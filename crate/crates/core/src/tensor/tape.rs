//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value and enough
//! structure to push gradients back to its inputs. Nodes are created in
//! topological order by construction, so `backward` is a single reverse sweep
//! with no explicit sorting. All forward values are checked for finiteness at
//! creation time; a NaN or infinity surfaces as an error naming the operation
//! that produced it instead of silently poisoning the training step.

use std::sync::Arc;

use super::sparse::{spmm_kernel, spmm_transpose_kernel};
use super::{DenseMatrix, SparsePattern, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { lhs: NodeId, rhs: NodeId },
    Spmm { pattern: Arc<SparsePattern>, values: NodeId, dense: NodeId },
    Add { lhs: NodeId, rhs: NodeId },
    Sub { lhs: NodeId, rhs: NodeId },
    Mul { lhs: NodeId, rhs: NodeId },
    Scale { input: NodeId, factor: f64 },
    ConcatCols { inputs: Vec<NodeId> },
    ConcatRows { inputs: Vec<NodeId> },
    Sigmoid { input: NodeId },
    LeakyRelu { input: NodeId, slope: f64 },
    Clamp { input: NodeId, lo: f64, hi: f64 },
    Exp { input: NodeId },
    Log { input: NodeId },
    Softplus { input: NodeId },
    LogsumexpRows { input: NodeId },
    SumAll { input: NodeId },
    MeanAll { input: NodeId },
    SumRows { input: NodeId },
    GatherRows { input: NodeId, indices: Arc<Vec<usize>> },
    SliceCols { input: NodeId, start: usize, len: usize },
    Transpose { input: NodeId },
    L2NormalizeRows { input: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Spmm { .. } => "spmm",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "subtract",
            Op::Mul { .. } => "multiply",
            Op::Scale { .. } => "scale",
            Op::ConcatCols { .. } => "concat-cols",
            Op::ConcatRows { .. } => "concat-rows",
            Op::Sigmoid { .. } => "sigmoid",
            Op::LeakyRelu { .. } => "leaky-relu",
            Op::Clamp { .. } => "clamp",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Softplus { .. } => "softplus",
            Op::LogsumexpRows { .. } => "logsumexp-rows",
            Op::SumAll { .. } => "sum",
            Op::MeanAll { .. } => "mean",
            Op::SumRows { .. } => "sum-rows",
            Op::GatherRows { .. } => "gather-rows",
            Op::SliceCols { .. } => "slice-cols",
            Op::Transpose { .. } => "transpose",
            Op::L2NormalizeRows { .. } => "l2-normalize-rows",
        }
    }
}

struct Node {
    value: DenseMatrix,
    op: Op,
    param: bool,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Gradient accumulated at a node, if any reached it.
    pub fn wrt(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }
}

/// Records a forward computation and replays it backwards for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf. `backward` always reports a gradient for
    /// it, zero when the loss never touches it.
    pub fn parameter(&mut self, value: DenseMatrix) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Registers a non-trainable leaf (data, noise draws, masks).
    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push_leaf(value, false)
    }

    /// Convenience constant of shape 1x1.
    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.constant(DenseMatrix::filled(1, 1, value))
    }

    fn push_leaf(&mut self, value: DenseMatrix, param: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op: Op::Leaf, param });
        id
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> Result<NodeId, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, param: false });
        Ok(id)
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.index()].value
    }

    /// Shapes of every node in creation order. Structural checks use this to
    /// confirm that no computation materialized a dense node it should not
    /// have (such as a full node-by-node adjacency).
    pub fn shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes.iter().map(|n| n.value.shape())
    }

    /// Node ids of every parameter leaf, in registration order.
    pub fn parameters(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.param)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    // ─── Forward operations ───────────────────────────────────────────────

    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(lhs).matmul(self.value(rhs))?;
        self.push(value, Op::Matmul { lhs, rhs })
    }

    /// Sparse-times-dense product. The pattern is constant; `values` holds one
    /// entry per nonzero as an nnz-by-1 node, so gradients reach both the
    /// dense operand and (when the values are not a constant) the edge
    /// weights themselves.
    pub fn spmm(
        &mut self,
        pattern: Arc<SparsePattern>,
        values: NodeId,
        dense: NodeId,
    ) -> Result<NodeId, TensorError> {
        let vals = self.value(values);
        if vals.cols() != 1 || vals.rows() != pattern.nnz() {
            return Err(TensorError::Contract {
                op: "spmm",
                detail: format!(
                    "value node must be {}x1, got {}x{}",
                    pattern.nnz(),
                    vals.rows(),
                    vals.cols()
                ),
            });
        }
        let value = spmm_kernel(&pattern, vals.data(), self.value(dense))?;
        self.push(value, Op::Spmm { pattern, values, dense })
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, TensorError> {
        let value = self.zip("add", lhs, rhs, |a, b| a + b)?;
        self.push(value, Op::Add { lhs, rhs })
    }

    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, TensorError> {
        let value = self.zip("subtract", lhs, rhs, |a, b| a - b)?;
        self.push(value, Op::Sub { lhs, rhs })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, TensorError> {
        let value = self.zip("multiply", lhs, rhs, |a, b| a * b)?;
        self.push(value, Op::Mul { lhs, rhs })
    }

    /// Multiplication by a compile-time-known scalar.
    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        if !factor.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let value = self.value(input).map(|v| v * factor);
        self.push(value, Op::Scale { input, factor })
    }

    /// Horizontal concatenation; all inputs must share a row count.
    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Contract {
                op: "concat-cols",
                detail: "needs at least one input".into(),
            });
        }
        let rows = self.value(inputs[0]).rows();
        if inputs.iter().any(|&id| self.value(id).rows() != rows) {
            return Err(TensorError::Contract {
                op: "concat-cols",
                detail: "inputs disagree on row count".into(),
            });
        }
        let cols: usize = inputs.iter().map(|&id| self.value(id).cols()).sum();
        let mut out = DenseMatrix::zeros(rows, cols);
        let mut offset = 0;
        for &id in inputs {
            let m = self.value(id);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(out, Op::ConcatCols { inputs: inputs.to_vec() })
    }

    /// Vertical concatenation; all inputs must share a column count.
    pub fn concat_rows(&mut self, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Contract {
                op: "concat-rows",
                detail: "needs at least one input".into(),
            });
        }
        let cols = self.value(inputs[0]).cols();
        if inputs.iter().any(|&id| self.value(id).cols() != cols) {
            return Err(TensorError::Contract {
                op: "concat-rows",
                detail: "inputs disagree on column count".into(),
            });
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &id in inputs {
            let m = self.value(id);
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let out = DenseMatrix::new(rows, cols, data)?;
        self.push(out, Op::ConcatRows { inputs: inputs.to_vec() })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(input).map(stable_sigmoid);
        self.push(value, Op::Sigmoid { input })
    }

    /// Leaky rectifier with configurable negative slope in `[0, 1]`.
    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> Result<NodeId, TensorError> {
        if !(0.0..=1.0).contains(&slope) {
            return Err(TensorError::Contract {
                op: "leaky-relu",
                detail: format!("slope must lie in [0, 1], got {slope}"),
            });
        }
        let value = self.value(input).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu { input, slope })
    }

    /// Elementwise clamp into `[lo, hi]`. The gradient passes through
    /// strictly interior entries and is zero at and beyond the rails.
    pub fn clamp(&mut self, input: NodeId, lo: f64, hi: f64) -> Result<NodeId, TensorError> {
        if !(lo < hi) || !hi.is_finite() || !lo.is_finite() {
            return Err(TensorError::Contract {
                op: "clamp",
                detail: format!("bounds must be finite with lo < hi, got [{lo}, {hi}]"),
            });
        }
        let value = self.value(input).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp { input, lo, hi })
    }

    pub fn exp(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(input).map(f64::exp);
        self.push(value, Op::Exp { input })
    }

    pub fn log(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(input).map(f64::ln);
        self.push(value, Op::Log { input })
    }

    pub fn softplus(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(input).map(stable_softplus);
        self.push(value, Op::Softplus { input })
    }

    /// Row-wise log-sum-exp, stabilized by subtracting each row's maximum.
    pub fn logsumexp_rows(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let m = self.value(input);
        if m.cols() == 0 {
            return Err(TensorError::Contract {
                op: "logsumexp-rows",
                detail: "rows must be non-empty".into(),
            });
        }
        let mut out = DenseMatrix::zeros(m.rows(), 1);
        for r in 0..m.rows() {
            out.set(r, 0, logsumexp(m.row(r)));
        }
        self.push(out, Op::LogsumexpRows { input })
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum_all(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let s: f64 = self.value(input).data().iter().sum();
        self.push(DenseMatrix::filled(1, 1, s), Op::SumAll { input })
    }

    /// Mean of all entries, as a 1x1 node.
    pub fn mean_all(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let m = self.value(input);
        let n = m.rows() * m.cols();
        if n == 0 {
            return Err(TensorError::Contract {
                op: "mean",
                detail: "mean of an empty matrix".into(),
            });
        }
        let s: f64 = m.data().iter().sum();
        self.push(DenseMatrix::filled(1, 1, s / n as f64), Op::MeanAll { input })
    }

    /// Per-row sums as an n-by-1 column.
    pub fn sum_rows(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let m = self.value(input);
        let mut out = DenseMatrix::zeros(m.rows(), 1);
        for r in 0..m.rows() {
            out.set(r, 0, m.row(r).iter().sum());
        }
        self.push(out, Op::SumRows { input })
    }

    /// Selects rows by index; repeated indices are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, input: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let m = self.value(input);
        if let Some(&bad) = indices.iter().find(|&&i| i >= m.rows()) {
            return Err(TensorError::Contract {
                op: "gather-rows",
                detail: format!("row index {bad} out of bounds for {} rows", m.rows()),
            });
        }
        let mut out = DenseMatrix::zeros(indices.len(), m.cols());
        for (r, &src) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(m.row(src));
        }
        self.push(out, Op::GatherRows { input, indices: Arc::new(indices.to_vec()) })
    }

    /// Contiguous column slice `[start, start + len)`.
    pub fn slice_cols(
        &mut self,
        input: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let m = self.value(input);
        if start + len > m.cols() {
            return Err(TensorError::Contract {
                op: "slice-cols",
                detail: format!(
                    "slice [{start}, {}) exceeds {} columns",
                    start + len,
                    m.cols()
                ),
            });
        }
        let mut out = DenseMatrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { input, start, len })
    }

    pub fn transpose(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(input).transpose();
        self.push(value, Op::Transpose { input })
    }

    /// Scales each row to unit Euclidean norm. A zero row has no direction,
    /// so it is reported as a numeric error naming the row.
    pub fn l2_normalize_rows(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let m = self.value(input);
        let mut out = DenseMatrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let norm = row_norm(m.row(r));
            if norm <= f64::MIN_POSITIVE {
                return Err(TensorError::ZeroNormRow { op: "l2-normalize-rows", row: r });
            }
            for (o, v) in out.row_mut(r).iter_mut().zip(m.row(r)) {
                *o = v / norm;
            }
        }
        self.push(out, Op::L2NormalizeRows { input })
    }

    // ─── Backward ─────────────────────────────────────────────────────────

    /// Runs one reverse sweep from a scalar loss node. Returns a gradient for
    /// every node the loss reaches; parameter leaves the loss never touches
    /// get an explicit zero gradient of their own shape.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let loss_value = self.value(loss);
        if loss_value.shape() != (1, 1) {
            return Err(TensorError::Contract {
                op: "backward",
                detail: format!(
                    "loss must be a 1x1 scalar node, got {}x{}",
                    loss_value.rows(),
                    loss_value.cols()
                ),
            });
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        grads[loss.index()] = Some(DenseMatrix::filled(1, 1, 1.0));

        for idx in (0..=loss.index()).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            self.propagate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.param && grads[idx].is_none() {
                grads[idx] = Some(DenseMatrix::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, grad: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { lhs, rhs } => {
                let l = self.value(*lhs);
                let r = self.value(*rhs);
                let dl = grad.matmul(&r.transpose()).expect("shape fixed at creation");
                let dr = l.transpose().matmul(grad).expect("shape fixed at creation");
                accumulate(grads, *lhs, dl);
                accumulate(grads, *rhs, dr);
            }
            Op::Spmm { pattern, values, dense } => {
                let vals = self.value(*values);
                let x = self.value(*dense);
                let dx = spmm_transpose_kernel(pattern, vals.data(), grad);
                accumulate(grads, *dense, dx);
                let mut dv = DenseMatrix::zeros(pattern.nnz(), 1);
                for r in 0..pattern.rows() {
                    for k in pattern.row_range(r) {
                        let col = pattern.col_indices()[k];
                        let dot: f64 =
                            grad.row(r).iter().zip(x.row(col)).map(|(g, v)| g * v).sum();
                        dv.set(k, 0, dot);
                    }
                }
                accumulate(grads, *values, dv);
            }
            Op::Add { lhs, rhs } => {
                accumulate(grads, *lhs, grad.clone());
                accumulate(grads, *rhs, grad.clone());
            }
            Op::Sub { lhs, rhs } => {
                accumulate(grads, *lhs, grad.clone());
                accumulate(grads, *rhs, grad.map(|v| -v));
            }
            Op::Mul { lhs, rhs } => {
                let l = self.value(*lhs);
                let r = self.value(*rhs);
                accumulate(grads, *lhs, hadamard(grad, r));
                accumulate(grads, *rhs, hadamard(grad, l));
            }
            Op::Scale { input, factor } => {
                accumulate(grads, *input, grad.map(|v| v * factor));
            }
            Op::ConcatCols { inputs } => {
                let mut offset = 0;
                for &id in inputs {
                    let m = self.value(id);
                    let mut slice = DenseMatrix::zeros(m.rows(), m.cols());
                    for r in 0..m.rows() {
                        slice
                            .row_mut(r)
                            .copy_from_slice(&grad.row(r)[offset..offset + m.cols()]);
                    }
                    offset += m.cols();
                    accumulate(grads, id, slice);
                }
            }
            Op::ConcatRows { inputs } => {
                let mut offset = 0;
                for &id in inputs {
                    let m = self.value(id);
                    let mut slice = DenseMatrix::zeros(m.rows(), m.cols());
                    for r in 0..m.rows() {
                        slice.row_mut(r).copy_from_slice(grad.row(offset + r));
                    }
                    offset += m.rows();
                    accumulate(grads, id, slice);
                }
            }
            Op::Sigmoid { input } => {
                let y = &node.value;
                let mut d = grad.clone();
                for (g, &s) in d.data_mut().iter_mut().zip(y.data()) {
                    *g *= s * (1.0 - s);
                }
                accumulate(grads, *input, d);
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input);
                let mut d = grad.clone();
                for (g, &v) in d.data_mut().iter_mut().zip(x.data()) {
                    *g *= if v > 0.0 { 1.0 } else { *slope };
                }
                accumulate(grads, *input, d);
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input);
                let mut d = grad.clone();
                for (g, &v) in d.data_mut().iter_mut().zip(x.data()) {
                    if !(*lo < v && v < *hi) {
                        *g = 0.0;
                    }
                }
                accumulate(grads, *input, d);
            }
            Op::Exp { input } => {
                accumulate(grads, *input, hadamard(grad, &node.value));
            }
            Op::Log { input } => {
                let x = self.value(*input);
                let mut d = grad.clone();
                for (g, &v) in d.data_mut().iter_mut().zip(x.data()) {
                    *g /= v;
                }
                accumulate(grads, *input, d);
            }
            Op::Softplus { input } => {
                let x = self.value(*input);
                let mut d = grad.clone();
                for (g, &v) in d.data_mut().iter_mut().zip(x.data()) {
                    *g *= stable_sigmoid(v);
                }
                accumulate(grads, *input, d);
            }
            Op::LogsumexpRows { input } => {
                let x = self.value(*input);
                let lse = &node.value;
                let mut d = DenseMatrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let g = grad.get(r, 0);
                    let l = lse.get(r, 0);
                    for (o, &v) in d.row_mut(r).iter_mut().zip(x.row(r)) {
                        *o = g * (v - l).exp();
                    }
                }
                accumulate(grads, *input, d);
            }
            Op::SumAll { input } => {
                let x = self.value(*input);
                accumulate(grads, *input, DenseMatrix::filled(x.rows(), x.cols(), grad.get(0, 0)));
            }
            Op::MeanAll { input } => {
                let x = self.value(*input);
                let n = (x.rows() * x.cols()) as f64;
                accumulate(
                    grads,
                    *input,
                    DenseMatrix::filled(x.rows(), x.cols(), grad.get(0, 0) / n),
                );
            }
            Op::SumRows { input } => {
                let x = self.value(*input);
                let mut d = DenseMatrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let g = grad.get(r, 0);
                    for o in d.row_mut(r) {
                        *o = g;
                    }
                }
                accumulate(grads, *input, d);
            }
            Op::GatherRows { input, indices } => {
                let x = self.value(*input);
                let mut d = DenseMatrix::zeros(x.rows(), x.cols());
                for (r, &src) in indices.iter().enumerate() {
                    for (o, g) in d.row_mut(src).iter_mut().zip(grad.row(r)) {
                        *o += g;
                    }
                }
                accumulate(grads, *input, d);
            }
            Op::SliceCols { input, start, len } => {
                let x = self.value(*input);
                let mut d = DenseMatrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    d.row_mut(r)[*start..start + len].copy_from_slice(grad.row(r));
                }
                accumulate(grads, *input, d);
            }
            Op::Transpose { input } => {
                accumulate(grads, *input, grad.transpose());
            }
            Op::L2NormalizeRows { input } => {
                let x = self.value(*input);
                let y = &node.value;
                let mut d = DenseMatrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = row_norm(x.row(r));
                    let dot: f64 = grad.row(r).iter().zip(y.row(r)).map(|(g, v)| g * v).sum();
                    for ((o, g), v) in d.row_mut(r).iter_mut().zip(grad.row(r)).zip(y.row(r)) {
                        *o = (g - dot * v) / norm;
                    }
                }
                accumulate(grads, *input, d);
            }
        }
    }

    /// Recomputes every node's forward value from the leaves. Used to check
    /// that a recorded computation is deterministic under replay.
    pub fn replay(&self) -> Result<Vec<DenseMatrix>, TensorError> {
        let mut values: Vec<DenseMatrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Matmul { lhs, rhs } => values[lhs.index()].matmul(&values[rhs.index()])?,
                Op::Spmm { pattern, values: vals, dense } => {
                    spmm_kernel(pattern, values[vals.index()].data(), &values[dense.index()])?
                }
                Op::Add { lhs, rhs } => {
                    zip_values(&values[lhs.index()], &values[rhs.index()], |a, b| a + b)
                }
                Op::Sub { lhs, rhs } => {
                    zip_values(&values[lhs.index()], &values[rhs.index()], |a, b| a - b)
                }
                Op::Mul { lhs, rhs } => {
                    zip_values(&values[lhs.index()], &values[rhs.index()], |a, b| a * b)
                }
                Op::Scale { input, factor } => values[input.index()].map(|v| v * factor),
                Op::ConcatCols { .. }
                | Op::ConcatRows { .. }
                | Op::LogsumexpRows { .. }
                | Op::SumAll { .. }
                | Op::MeanAll { .. }
                | Op::SumRows { .. }
                | Op::GatherRows { .. }
                | Op::SliceCols { .. }
                | Op::Transpose { .. }
                | Op::L2NormalizeRows { .. } => self.replay_structural(&node.op, &values)?,
                Op::Sigmoid { input } => values[input.index()].map(stable_sigmoid),
                Op::LeakyRelu { input, slope } => {
                    let s = *slope;
                    values[input.index()].map(|v| if v > 0.0 { v } else { s * v })
                }
                Op::Clamp { input, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    values[input.index()].map(|v| v.clamp(lo, hi))
                }
                Op::Exp { input } => values[input.index()].map(f64::exp),
                Op::Log { input } => values[input.index()].map(f64::ln),
                Op::Softplus { input } => values[input.index()].map(stable_softplus),
            };
            values.push(v);
        }
        Ok(values)
    }

    fn replay_structural(
        &self,
        op: &Op,
        values: &[DenseMatrix],
    ) -> Result<DenseMatrix, TensorError> {
        // Structural ops copy data around; reuse the forward builders on a
        // scratch tape seeded with the replayed inputs.
        let mut scratch = Tape::new();
        Ok(match op {
            Op::ConcatCols { inputs } => {
                let ids: Vec<_> =
                    inputs.iter().map(|i| scratch.constant(values[i.index()].clone())).collect();
                let id = scratch.concat_cols(&ids)?;
                scratch.value(id).clone()
            }
            Op::ConcatRows { inputs } => {
                let ids: Vec<_> =
                    inputs.iter().map(|i| scratch.constant(values[i.index()].clone())).collect();
                let id = scratch.concat_rows(&ids)?;
                scratch.value(id).clone()
            }
            Op::LogsumexpRows { input } => {
                let id = scratch.constant(values[input.index()].clone());
                let id = scratch.logsumexp_rows(id)?;
                scratch.value(id).clone()
            }
            Op::SumAll { input } => {
                let id = scratch.constant(values[input.index()].clone());
                let id = scratch.sum_all(id)?;
                scratch.value(id).clone()
            }
            Op::MeanAll { input } => {
                let id = scratch.constant(values[input.index()].clone());
                let id = scratch.mean_all(id)?;
                scratch.value(id).clone()
            }
            Op::SumRows { input } => {
                let id = scratch.constant(values[input.index()].clone());
                let id = scratch.sum_rows(id)?;
                scratch.value(id).clone()
            }
            Op::GatherRows { input, indices } => {
                let id = scratch.constant(values[input.index()].clone());
                let id = scratch.gather_rows(id, indices)?;
                scratch.value(id).clone()
            }
            Op::SliceCols { input, start, len } => {
                let id = scratch.constant(values[input.index()].clone());
                let id = scratch.slice_cols(id, *start, *len)?;
                scratch.value(id).clone()
            }
            Op::Transpose { input } => values[input.index()].transpose(),
            Op::L2NormalizeRows { input } => {
                let id = scratch.constant(values[input.index()].clone());
                let id = scratch.l2_normalize_rows(id)?;
                scratch.value(id).clone()
            }
            _ => unreachable!("replay_structural only handles structural ops"),
        })
    }

    fn zip(
        &self,
        op: &'static str,
        lhs: NodeId,
        rhs: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DenseMatrix, TensorError> {
        let l = self.value(lhs);
        let r = self.value(rhs);
        if l.shape() != r.shape() {
            return Err(TensorError::Contract {
                op,
                detail: format!(
                    "shapes disagree: {}x{} vs {}x{}",
                    l.rows(),
                    l.cols(),
                    r.rows(),
                    r.cols()
                ),
            });
        }
        Ok(zip_values(l, r, f))
    }
}

fn zip_values(l: &DenseMatrix, r: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
    let data = l.data().iter().zip(r.data()).map(|(&a, &b)| f(a, b)).collect();
    DenseMatrix::new(l.rows(), l.cols(), data).expect("zip preserves shape")
}

fn hadamard(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    zip_values(a, b, |x, y| x * y)
}

fn accumulate(grads: &mut [Option<DenseMatrix>], id: NodeId, delta: DenseMatrix) {
    match &mut grads[id.index()] {
        Some(g) => g.add_scaled(&delta, 1.0),
        slot => *slot = Some(delta),
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Numerically stable logistic function.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: usize, cols: usize, data: &[f64]) -> DenseMatrix {
        DenseMatrix::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut tape = Tape::new();
        let m = tape.parameter(matrix(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let loss = tape.mean_all(m).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(m).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.parameter(matrix(1, 2, &[1.0, 2.0]));
        let unused = tape.parameter(matrix(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let loss = tape.sum_all(used).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(unused).unwrap();
        assert_eq!(g.shape(), (2, 2));
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let m = tape.parameter(matrix(2, 2, &[1.0; 4]));
        let s = tape.sigmoid(m).unwrap();
        let err = tape.backward(s).unwrap_err();
        assert!(matches!(err, TensorError::Contract { op: "backward", .. }));
    }

    #[test]
    fn log_of_negative_names_the_operation() {
        let mut tape = Tape::new();
        let m = tape.constant(matrix(1, 2, &[1.0, -1.0]));
        let err = tape.log(m).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "log" }));
    }

    #[test]
    fn leaky_relu_rejects_slope_outside_unit_interval() {
        let mut tape = Tape::new();
        let m = tape.constant(matrix(1, 1, &[1.0]));
        assert!(tape.leaky_relu(m, 1.5).is_err());
        assert!(tape.leaky_relu(m, -0.1).is_err());
        assert!(tape.leaky_relu(m, 0.5).is_ok());
    }

    #[test]
    fn clamp_saturates_values_and_masks_their_gradients() {
        let mut tape = Tape::new();
        let m = tape.parameter(matrix(1, 4, &[-2.0, 0.3, 0.5, 2.0]));
        let c = tape.clamp(m, -0.5, 0.5).unwrap();
        assert_eq!(tape.value(c).data(), &[-0.5, 0.3, 0.5, 2.0f64.min(0.5)]);
        let loss = tape.sum_all(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        // The entry sitting exactly on a rail gets no gradient either.
        assert_eq!(grads.wrt(m).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn clamp_rejects_inverted_bounds() {
        let mut tape = Tape::new();
        let m = tape.constant(matrix(1, 1, &[1.0]));
        assert!(tape.clamp(m, 0.5, -0.5).is_err());
        assert!(tape.clamp(m, 0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn logsumexp_is_stable_for_large_inputs() {
        let mut tape = Tape::new();
        let m = tape.constant(matrix(1, 2, &[1000.0, 1000.1]));
        let out = tape.logsumexp_rows(m).unwrap();
        let got = tape.value(out).get(0, 0);
        // Analytically: 1000.1 + ln(1 + e^{-0.1}).
        let want = 1000.1 + (1.0 + (-0.1f64).exp()).ln();
        assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
    }

    #[test]
    fn spmm_gradient_reaches_values_and_dense() {
        let mut tape = Tape::new();
        let sparse =
            crate::tensor::SparseMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (1, 1, 3.0)]).unwrap();
        let values = tape.parameter(matrix(2, 1, &[2.0, 3.0]));
        let dense = tape.parameter(matrix(2, 1, &[5.0, 7.0]));
        let out = tape.spmm(sparse.pattern().clone(), values, dense).unwrap();
        let loss = tape.sum_all(out).unwrap();
        let grads = tape.backward(loss).unwrap();
        // loss = 2*5 + 3*7, so d/dvalues = [5, 7], d/ddense = [2, 3].
        assert_eq!(grads.wrt(values).unwrap().data(), &[5.0, 7.0]);
        assert_eq!(grads.wrt(dense).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn gather_accumulates_duplicate_rows() {
        let mut tape = Tape::new();
        let m = tape.parameter(matrix(2, 1, &[1.0, 2.0]));
        let g = tape.gather_rows(m, &[0, 0, 1]).unwrap();
        let loss = tape.sum_all(g).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(m).unwrap().data(), &[2.0, 1.0]);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad(a*f + b*g) must equal a*grad(f) + b*grad(g) exactly.
        let build = |a: f64, b: f64| {
            let mut tape = Tape::new();
            let x = tape.parameter(matrix(2, 2, &[0.3, -0.7, 1.1, 0.4]));
            let f = {
                let s = tape.sigmoid(x).unwrap();
                tape.sum_all(s).unwrap()
            };
            let g = {
                let e = tape.exp(x).unwrap();
                tape.mean_all(e).unwrap()
            };
            let fa = tape.scale(f, a).unwrap();
            let gb = tape.scale(g, b).unwrap();
            let loss = tape.add(fa, gb).unwrap();
            let grads = tape.backward(loss).unwrap();
            grads.wrt(x).unwrap().clone()
        };
        let combined = build(2.0, -3.0);
        let f_only = build(1.0, 0.0);
        let g_only = build(0.0, 1.0);
        for i in 0..4 {
            let want = 2.0 * f_only.data()[i] - 3.0 * g_only.data()[i];
            assert!((combined.data()[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn replay_reproduces_forward_values_bitwise() {
        let mut tape = Tape::new();
        let x = tape.parameter(matrix(2, 2, &[0.5, -1.0, 2.0, 0.1]));
        let w = tape.parameter(matrix(2, 2, &[1.0, 0.0, -0.5, 0.25]));
        let mm = tape.matmul(x, w).unwrap();
        let act = tape.leaky_relu(mm, 0.5).unwrap();
        let cat = tape.concat_cols(&[act, x]).unwrap();
        let lse = tape.logsumexp_rows(cat).unwrap();
        let _loss = tape.sum_all(lse).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            let stored = tape.value(NodeId(i));
            assert_eq!(stored.data(), v.data(), "node {i} diverged under replay");
        }
    }

    #[test]
    fn transpose_backward_transposes_gradient() {
        let mut tape = Tape::new();
        let x = tape.parameter(matrix(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let t = tape.transpose(x).unwrap();
        let row = tape.gather_rows(t, &[1]).unwrap();
        let loss = tape.sum_all(row).unwrap();
        let grads = tape.backward(loss).unwrap();
        // Row 1 of x^T is column 1 of x.
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }
}
