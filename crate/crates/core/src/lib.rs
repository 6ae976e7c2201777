//! Self-supervised graph collaborative filtering at desk scale.
//!
//! The engine trains user/item embeddings on an implicit-feedback bipartite
//! graph with three cooperating signals:
//!
//! * a pairwise ranking loss on the observed graph,
//! * a contrastive loss between two learned graph augmentations, and
//! * an information-bottleneck penalty that keeps the augmented views both
//!   predictive and compressed.
//!
//! Everything runs on a small reverse-mode tensor tape ([`tensor`]) so that a
//! single `backward` call yields exact gradients for every parameter. The
//! remaining modules follow the data path: [`graph`] ingests and normalizes
//! interaction data, [`encoder`] runs the multi-hop message-passing encoder,
//! [`augmentor`] learns edge keep-probabilities and samples differentiable
//! graph views, [`gib`] and [`losses`] assemble the objective, [`trainer`]
//! optimizes it, and [`eval`] measures ranking quality, robustness, and
//! oversmoothing.

#![forbid(unsafe_code)]

pub mod augmentor;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod eval;
pub mod gib;
pub mod graph;
pub mod losses;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use tensor::{DenseMatrix, NodeId, SparseMatrix, SparsePattern, Tape, TensorError};
