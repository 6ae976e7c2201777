//! Training objectives assembled on the tape.
//!
//! Three ingredients: a pairwise ranking loss over sampled triplets, a
//! temperature-scaled contrastive loss between two view embeddings, and a
//! Frobenius penalty over the parameters. [`joint_loss`] combines them with
//! the bottleneck term into the scalar the trainer differentiates.

use crate::tensor::{NodeId, Tape, TensorError};

/// One ranking observation: `user` prefers item `pos` over item `neg`.
/// Items are dense indices in `0..n_items`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

fn contract(op: &'static str, detail: String) -> TensorError {
    TensorError::Contract { op, detail }
}

/// Score gaps `s(u, neg) - s(u, pos)` for every triplet, as an n-by-1 node.
/// Scores are inner products of rows of `embeddings`, whose first `n_users`
/// rows are users and the rest items.
fn score_gaps(
    tape: &mut Tape,
    embeddings: NodeId,
    triplets: &[Triplet],
    n_users: usize,
) -> Result<NodeId, TensorError> {
    if triplets.is_empty() {
        return Err(contract("ranking-loss", "triplet batch is empty".into()));
    }
    let rows = tape.value(embeddings).rows();
    for t in triplets {
        if t.user >= n_users || n_users + t.pos.max(t.neg) >= rows {
            return Err(contract(
                "ranking-loss",
                format!("triplet ({}, {}, {}) outside the embedding table", t.user, t.pos, t.neg),
            ));
        }
    }
    let users: Vec<usize> = triplets.iter().map(|t| t.user).collect();
    let pos: Vec<usize> = triplets.iter().map(|t| n_users + t.pos).collect();
    let neg: Vec<usize> = triplets.iter().map(|t| n_users + t.neg).collect();
    let u = tape.gather_rows(embeddings, &users)?;
    let p = tape.gather_rows(embeddings, &pos)?;
    let n = tape.gather_rows(embeddings, &neg)?;
    let up = tape.mul(u, p)?;
    let un = tape.mul(u, n)?;
    let s_pos = tape.sum_rows(up)?;
    let s_neg = tape.sum_rows(un)?;
    tape.sub(s_neg, s_pos)
}

/// Pairwise ranking loss, summed over the batch:
/// `sum_t -log sigmoid(s_pos - s_neg) = sum_t softplus(s_neg - s_pos)`.
pub fn bpr(
    tape: &mut Tape,
    embeddings: NodeId,
    triplets: &[Triplet],
    n_users: usize,
) -> Result<NodeId, TensorError> {
    let gaps = score_gaps(tape, embeddings, triplets, n_users)?;
    let losses = tape.softplus(gaps)?;
    tape.sum_all(losses)
}

/// Mean per-triplet ranking negative log-likelihood on one embedding matrix.
/// Same shape as [`bpr`] but averaged, for use as a bottleneck likelihood.
pub fn ranking_likelihood(
    tape: &mut Tape,
    embeddings: NodeId,
    triplets: &[Triplet],
    n_users: usize,
) -> Result<NodeId, TensorError> {
    let gaps = score_gaps(tape, embeddings, triplets, n_users)?;
    let losses = tape.softplus(gaps)?;
    tape.mean_all(losses)
}

/// Which rows serve as contrastive negatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeMode {
    /// The anchor set itself (in-batch negatives).
    Anchors,
    /// An explicit row range, typically all users or all items.
    Range { start: usize, end: usize },
}

/// Contrastive alignment of two embedding matrices over the anchor rows:
/// rows are L2-normalized, similarities scaled by `1/temperature`, and the
/// loss sums `logsumexp_negatives - positive` per anchor. The positive pair
/// is the same row in both matrices; negatives are drawn from the second.
pub fn infonce(
    tape: &mut Tape,
    first: NodeId,
    second: NodeId,
    anchors: &[usize],
    negatives: NegativeMode,
    temperature: f64,
) -> Result<NodeId, TensorError> {
    if anchors.is_empty() {
        return Err(contract("contrastive-loss", "anchor set is empty".into()));
    }
    if !(temperature > 0.0) {
        return Err(contract(
            "contrastive-loss",
            format!("temperature must be positive, got {temperature}"),
        ));
    }
    let negative_rows: Vec<usize> = match negatives {
        NegativeMode::Anchors => anchors.to_vec(),
        NegativeMode::Range { start, end } => {
            if start >= end {
                return Err(contract(
                    "contrastive-loss",
                    format!("negative row range {start}..{end} is empty"),
                ));
            }
            (start..end).collect()
        }
    };
    // The positive must appear among the negatives for the loss to stay a
    // proper cross-entropy.
    for &a in anchors {
        if !negative_rows.contains(&a) {
            return Err(contract(
                "contrastive-loss",
                format!("anchor row {a} is missing from the negative set"),
            ));
        }
    }

    let a1 = tape.gather_rows(first, anchors)?;
    let n1 = tape.l2_normalize_rows(a1)?;
    let a2 = tape.gather_rows(second, anchors)?;
    let n2 = tape.l2_normalize_rows(a2)?;
    let neg = tape.gather_rows(second, &negative_rows)?;
    let neg_n = tape.l2_normalize_rows(neg)?;
    let neg_t = tape.transpose(neg_n)?;
    let sims = tape.matmul(n1, neg_t)?;
    let scaled = tape.scale(sims, 1.0 / temperature)?;
    let lse = tape.logsumexp_rows(scaled)?;
    let pos_prod = tape.mul(n1, n2)?;
    let pos = tape.sum_rows(pos_prod)?;
    let pos_scaled = tape.scale(pos, 1.0 / temperature)?;
    let diff = tape.sub(lse, pos_scaled)?;
    tape.sum_all(diff)
}

/// Squared Frobenius norm of all parameter nodes, summed.
pub fn frobenius(tape: &mut Tape, params: &[NodeId]) -> Result<NodeId, TensorError> {
    if params.is_empty() {
        return Err(contract("regularizer", "parameter list is empty".into()));
    }
    let mut total: Option<NodeId> = None;
    for &p in params {
        let sq = tape.mul(p, p)?;
        let s = tape.sum_all(sq)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.unwrap())
}

/// The full objective
/// `bpr + beta1 * gib + beta2 * contrastive + beta3 * regularizer`,
/// each argument a scalar node.
pub fn joint_loss(
    tape: &mut Tape,
    bpr: NodeId,
    gib: NodeId,
    contrastive: NodeId,
    regularizer: NodeId,
    beta1: f64,
    beta2: f64,
    beta3: f64,
) -> Result<NodeId, TensorError> {
    for (name, beta) in [("beta1", beta1), ("beta2", beta2), ("beta3", beta3)] {
        if !(beta >= 0.0) {
            return Err(contract("joint-loss", format!("{name} must be non-negative, got {beta}")));
        }
    }
    let g = tape.scale(gib, beta1)?;
    let c = tape.scale(contrastive, beta2)?;
    let r = tape.scale(regularizer, beta3)?;
    let t1 = tape.add(bpr, g)?;
    let t2 = tape.add(t1, c)?;
    tape.add(t2, r)
}
