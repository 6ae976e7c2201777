//! Compressed sparse row storage.
//!
//! The structure of a sparse matrix (its nonzero positions) is immutable and
//! shared via [`SparsePattern`], while values live separately. That split lets
//! the tape treat the values of a sampled adjacency as a differentiable
//! operand while the pattern stays a plain constant.

use std::sync::Arc;

use super::{DenseMatrix, TensorError};

/// Nonzero layout of a CSR matrix: row offsets plus column indices.
///
/// Column indices are strictly increasing within each row, so a pattern never
/// stores duplicate coordinates.
#[derive(Debug, PartialEq, Eq)]
pub struct SparsePattern {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
}

impl SparsePattern {
    pub fn new(
        rows: usize,
        cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
    ) -> Result<Self, TensorError> {
        if row_offsets.len() != rows + 1 || row_offsets.first() != Some(&0) {
            return Err(TensorError::Contract {
                op: "sparse-pattern",
                detail: format!("expected {} row offsets starting at 0", rows + 1),
            });
        }
        if row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(TensorError::Contract {
                op: "sparse-pattern",
                detail: "row offsets must be non-decreasing".into(),
            });
        }
        if *row_offsets.last().unwrap() != col_indices.len() {
            return Err(TensorError::Contract {
                op: "sparse-pattern",
                detail: "final row offset must equal the number of nonzeros".into(),
            });
        }
        for r in 0..rows {
            let row = &col_indices[row_offsets[r]..row_offsets[r + 1]];
            if row.iter().any(|&c| c >= cols) {
                return Err(TensorError::Contract {
                    op: "sparse-pattern",
                    detail: format!("column index out of bounds in row {r}"),
                });
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(TensorError::Contract {
                    op: "sparse-pattern",
                    detail: format!("column indices must be strictly increasing in row {r}"),
                });
            }
        }
        Ok(Self { rows, cols, row_offsets, col_indices })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    /// Range into the column/value arrays covering one row.
    pub fn row_range(&self, row: usize) -> std::ops::Range<usize> {
        self.row_offsets[row]..self.row_offsets[row + 1]
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }
}

/// A CSR matrix: shared pattern plus one value per nonzero.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    pattern: Arc<SparsePattern>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn new(pattern: Arc<SparsePattern>, values: Vec<f64>) -> Result<Self, TensorError> {
        if values.len() != pattern.nnz() {
            return Err(TensorError::Contract {
                op: "sparse-new",
                detail: format!(
                    "{} values for a pattern with {} nonzeros",
                    values.len(),
                    pattern.nnz()
                ),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "sparse-new" });
        }
        Ok(Self { pattern, values })
    }

    /// Builds a matrix from (row, col, value) triplets. Duplicate coordinates
    /// are rejected rather than summed.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, TensorError> {
        let mut sorted: Vec<_> = triplets.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        if sorted.windows(2).any(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(TensorError::Contract {
                op: "sparse-from-triplets",
                detail: "duplicate coordinate".into(),
            });
        }
        let mut row_offsets = vec![0usize; rows + 1];
        let mut col_indices = Vec::with_capacity(sorted.len());
        let mut values = Vec::with_capacity(sorted.len());
        for &(r, c, v) in &sorted {
            if r >= rows || c >= cols {
                return Err(TensorError::Contract {
                    op: "sparse-from-triplets",
                    detail: format!("coordinate ({r}, {c}) outside a {rows}x{cols} matrix"),
                });
            }
            row_offsets[r + 1] += 1;
            col_indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        let pattern = Arc::new(SparsePattern::new(rows, cols, row_offsets, col_indices)?);
        SparseMatrix::new(pattern, values)
    }

    /// Sparse identity of order `n`.
    pub fn identity(n: usize) -> Self {
        let triplets: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, n, &triplets).expect("identity triplets are always valid")
    }

    pub fn pattern(&self) -> &Arc<SparsePattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.pattern.rows()
    }

    pub fn cols(&self) -> usize {
        self.pattern.cols()
    }

    pub fn nnz(&self) -> usize {
        self.pattern.nnz()
    }

    /// Densifies, mostly for tests and small oracles.
    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows(), self.cols());
        for r in 0..self.rows() {
            for idx in self.pattern.row_range(r) {
                out.set(r, self.pattern.col_indices()[idx], self.values[idx]);
            }
        }
        out
    }

    /// `self * dense` via the shared kernel.
    pub fn multiply(&self, dense: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
        spmm_kernel(&self.pattern, &self.values, dense)
    }
}

/// Sparse-times-dense product with caller-supplied values.
pub fn spmm_kernel(
    pattern: &SparsePattern,
    values: &[f64],
    dense: &DenseMatrix,
) -> Result<DenseMatrix, TensorError> {
    if pattern.cols() != dense.rows() {
        return Err(TensorError::Contract {
            op: "spmm",
            detail: format!(
                "inner dimensions disagree: {}x{} times {}x{}",
                pattern.rows(),
                pattern.cols(),
                dense.rows(),
                dense.cols()
            ),
        });
    }
    if values.len() != pattern.nnz() {
        return Err(TensorError::Contract {
            op: "spmm",
            detail: "value buffer does not match the pattern".into(),
        });
    }
    let cols = dense.cols();
    let mut out = DenseMatrix::zeros(pattern.rows(), cols);
    for r in 0..pattern.rows() {
        for idx in pattern.row_range(r) {
            let v = values[idx];
            let src = dense.row(pattern.col_indices()[idx]);
            let dst = out.row_mut(r);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += v * s;
            }
        }
    }
    Ok(out)
}

/// Transpose-apply `A^T * dense`, used by the backward pass of spmm.
pub fn spmm_transpose_kernel(
    pattern: &SparsePattern,
    values: &[f64],
    dense: &DenseMatrix,
) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(pattern.cols(), dense.cols());
    for r in 0..pattern.rows() {
        for idx in pattern.row_range(r) {
            let v = values[idx];
            let src = dense.row(r);
            let dst = out.row_mut(pattern.col_indices()[idx]);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += v * s;
            }
        }
    }
    out
}
