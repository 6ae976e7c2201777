//! Dense and sparse matrices plus a reverse-mode differentiation tape.
//!
//! The op set is the closure of what the model needs: products (dense and
//! sparse-times-dense), elementwise arithmetic and activations, row/column
//! restructuring, stabilized log-sum-exp, and scalar reductions. Everything
//! is `f64`; desk-scale problems never justify mixed precision here.

mod dense;
mod sparse;
mod tape;

pub use dense::DenseMatrix;
pub use sparse::{spmm_kernel, spmm_transpose_kernel, SparseMatrix, SparsePattern};
pub use tape::{stable_sigmoid, stable_softplus, Gradients, NodeId, Tape};

/// Errors surfaced by matrix construction and tape operations.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    /// An operation was invoked outside its contract (shape mismatch, bad
    /// index, invalid hyperparameter).
    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A forward value came out NaN or infinite.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// A row with zero Euclidean norm cannot be normalized.
    #[error("{op}: row {row} has zero norm")]
    ZeroNormRow { op: &'static str, row: usize },
}
