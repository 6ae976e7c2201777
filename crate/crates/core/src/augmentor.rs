//! Learnable graph augmentation.
//!
//! The augmentor scores every candidate edge with a small MLP over the two
//! endpoint embeddings, after those embeddings have been softly corrupted by
//! per-node masks and Gaussian noise. Sampling a view is a concrete
//! relaxation: logistic noise is added to each edge logit, squashed back
//! through a temperature-sharpened sigmoid, and thresholded. The kept edges
//! form a normalized soft adjacency whose values stay on the tape, so the
//! encoder run on a sampled view sends gradients back into the MLP.
//!
//! Sampling twice with independent seeds yields the two views the
//! contrastive and bottleneck objectives compare.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::graph::InteractionGraph;
use crate::tensor::{DenseMatrix, NodeId, SparsePattern, Tape, TensorError};

/// Negative slope shared by the scoring MLP's hidden activation.
pub const MLP_LEAKY_SLOPE: f64 = 0.5;

/// Edge probabilities are railed to `[PROB_FLOOR, 1 - PROB_FLOOR]`, the same
/// interval the logistic noise is drawn from.
pub const PROB_FLOOR: f64 = 1e-12;

/// Errors from augmentor configuration or sampling.
#[derive(Debug, thiserror::Error)]
pub enum AugmentorError {
    #[error("augmentor configuration: {0}")]
    Config(String),

    #[error("augmentor contract: {0}")]
    Contract(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Owned augmentor state: the edge-scoring MLP plus sampling knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentorParams {
    /// First MLP layer, `2d x d`.
    pub w1: DenseMatrix,
    /// Output layer, `d x 1`, producing the edge logit.
    pub w2: DenseMatrix,
    /// Keep-probability of the per-dimension node masks.
    pub keep_prob: f64,
    /// Concrete-relaxation temperature; smaller is closer to hard sampling.
    pub temperature: f64,
    /// Soft weights at or below this threshold drop the edge.
    pub threshold: f64,
}

impl AugmentorParams {
    pub fn init(
        d: usize,
        keep_prob: f64,
        temperature: f64,
        threshold: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, AugmentorError> {
        let b1 = 1.0 / ((2 * d) as f64).sqrt();
        let b2 = 1.0 / (d as f64).sqrt();
        let params = Self {
            w1: DenseMatrix::uniform(rng, 2 * d, d, -b1, b1),
            w2: DenseMatrix::uniform(rng, d, 1, -b2, b2),
            keep_prob,
            temperature,
            threshold,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), AugmentorError> {
        if !(0.0..=1.0).contains(&self.keep_prob) {
            return Err(AugmentorError::Config(format!(
                "mask keep-probability must lie in [0, 1], got {}",
                self.keep_prob
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(AugmentorError::Config(format!(
                "sampling temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(AugmentorError::Config(format!(
                "threshold must lie in [0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Registers the MLP weights as tape parameters.
    pub fn bind(&self, tape: &mut Tape) -> MlpNodes {
        MlpNodes { w1: tape.parameter(self.w1.clone()), w2: tape.parameter(self.w2.clone()) }
    }
}

/// Tape handles of the scoring MLP.
#[derive(Clone, Copy, Debug)]
pub struct MlpNodes {
    pub w1: NodeId,
    pub w2: NodeId,
}

/// Result of scoring candidate edges.
#[derive(Clone, Copy, Debug)]
pub struct EdgeProbabilities {
    /// Per-candidate keep probability, an E-by-1 node with values in (0, 1).
    pub probabilities: NodeId,
    /// The mask-and-noise-disturbed embeddings the probabilities were scored
    /// from; a sampled view is encoded starting from these.
    pub disturbed: NodeId,
}

/// Which edges the augmentor may emit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CandidatePolicy {
    /// Exactly the observed edges.
    Observed,
    /// Observed edges plus uniformly sampled co-interaction pairs (items two
    /// interaction hops beyond the user's own items), capped at
    /// `floor(budget * E)` extras.
    TwoHop { budget: f64, seed: u64 },
}

/// Candidate edges for augmentation under the given policy, as
/// (user, item) pairs with dense indices.
pub fn candidate_edges(
    g: &InteractionGraph,
    policy: CandidatePolicy,
) -> Result<Vec<(usize, usize)>, AugmentorError> {
    let mut candidates = g.edges();
    match policy {
        CandidatePolicy::Observed => Ok(candidates),
        CandidatePolicy::TwoHop { budget, seed } => {
            if !(0.0..=1.0).contains(&budget) {
                return Err(AugmentorError::Config(format!(
                    "candidate budget must lie in [0, 1], got {budget}"
                )));
            }
            let target = (budget * g.n_interactions() as f64).floor() as usize;
            if target == 0 {
                return Ok(candidates);
            }
            let users_of = g.users_of_items();
            let mut extras = Vec::new();
            for u in 0..g.n_users() {
                let mut reach: Vec<usize> = Vec::new();
                for &v in g.items_of(u) {
                    for &co_user in &users_of[v] {
                        if co_user != u {
                            reach.extend_from_slice(g.items_of(co_user));
                        }
                    }
                }
                reach.sort_unstable();
                reach.dedup();
                for v in reach {
                    if !g.has_edge(u, v) {
                        extras.push((u, v));
                    }
                }
            }
            let mut rng = crate::rng::stream(seed, "candidates", 0);
            let take = target.min(extras.len());
            for i in 0..take {
                let j = rng.gen_range(i..extras.len());
                extras.swap(i, j);
            }
            extras.truncate(take);
            extras.sort_unstable();
            candidates.extend(extras);
            Ok(candidates)
        }
    }
}

/// Scores every candidate edge: disturb the embeddings with fresh mask and
/// noise draws (once per node per call), then apply the shared MLP to the
/// concatenated endpoint rows. Returns probabilities strictly inside (0, 1).
pub fn edge_probability(
    tape: &mut Tape,
    hbar: NodeId,
    candidates: &[(usize, usize)],
    n_users: usize,
    mlp: &MlpNodes,
    params: &AugmentorParams,
    seed: u64,
) -> Result<EdgeProbabilities, AugmentorError> {
    params.validate()?;
    if candidates.is_empty() {
        return Err(AugmentorError::Contract("candidate edge list is empty".into()));
    }
    let (rows, d) = tape.value(hbar).shape();
    if n_users >= rows {
        return Err(AugmentorError::Contract(format!(
            "{n_users} users do not fit in {rows} embedding rows"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = DenseMatrix::from_fn(rows, d, |_, _| {
        if rng.gen::<f64>() < params.keep_prob {
            1.0
        } else {
            0.0
        }
    });
    let noise = DenseMatrix::from_fn(rows, d, |_, _| rng.sample(StandardNormal));

    let mask = tape.constant(mask);
    let noise = tape.constant(noise);
    let centered = tape.sub(hbar, noise)?;
    let masked = tape.mul(centered, mask)?;
    let disturbed = tape.add(masked, noise)?;

    let user_rows: Vec<usize> = candidates.iter().map(|&(u, _)| u).collect();
    let item_rows: Vec<usize> = candidates.iter().map(|&(_, v)| n_users + v).collect();
    if let Some(&(_, bad)) = candidates.iter().find(|&&(_, v)| n_users + v >= rows) {
        return Err(AugmentorError::Contract(format!(
            "candidate item index {bad} outside the embedding table"
        )));
    }
    let hu = tape.gather_rows(disturbed, &user_rows)?;
    let hv = tape.gather_rows(disturbed, &item_rows)?;
    let pair = tape.concat_cols(&[hu, hv])?;
    let hidden = tape.matmul(pair, mlp.w1)?;
    let act = tape.leaky_relu(hidden, MLP_LEAKY_SLOPE)?;
    let logits = tape.matmul(act, mlp.w2)?;
    let raw = tape.sigmoid(logits)?;
    // Long training can push the scores past where the sigmoid rounds to
    // exactly 0 or 1 in f64; rail the output so the logit downstream stays
    // finite.
    let probabilities = tape.clamp(raw, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    Ok(EdgeProbabilities { probabilities, disturbed })
}

/// One sampled graph view.
#[derive(Clone, Debug)]
pub struct AugmentedView {
    /// The candidate edges the soft weights refer to.
    pub candidates: Vec<(usize, usize)>,
    /// Per-candidate soft weight node, E-by-1 with entries in (0, 1).
    pub soft: NodeId,
    /// Indices into `candidates` whose soft weight cleared the threshold.
    pub kept: Vec<usize>,
    /// Pattern of the normalized soft adjacency over `I + J` nodes (kept
    /// edges, both directions, plus self-loops).
    pub pattern: Arc<SparsePattern>,
    /// Differentiable nnz-by-1 values aligned with `pattern`.
    pub values: NodeId,
    /// The seed the logistic noise was drawn from.
    pub seed: u64,
}

impl AugmentedView {
    /// Thresholded weights: the soft weight where kept, zero otherwise.
    pub fn thresholded(&self, tape: &Tape) -> Vec<f64> {
        let soft = tape.value(self.soft);
        let mut out = vec![0.0; soft.rows()];
        for &k in &self.kept {
            out[k] = soft.get(k, 0);
        }
        out
    }
}

/// Samples one view by the concrete relaxation: per candidate edge draw
/// `e ~ Uniform(0,1)`, form `sigmoid((logit(p) + logit(e)) / temperature)`,
/// and keep the edge when the result clears the threshold. The kept edges
/// are assembled into a self-loop-augmented, degree-normalized adjacency
/// whose off-diagonal values carry the soft weights, so the whole view stays
/// differentiable.
pub fn sample_view(
    tape: &mut Tape,
    probabilities: NodeId,
    candidates: &[(usize, usize)],
    n_users: usize,
    n_items: usize,
    params: &AugmentorParams,
    seed: u64,
) -> Result<AugmentedView, AugmentorError> {
    params.validate()?;
    let probs = tape.value(probabilities);
    if candidates.is_empty() || probs.shape() != (candidates.len(), 1) {
        return Err(AugmentorError::Contract(format!(
            "probability node must be {}x1 over a non-empty candidate list, got {}x{}",
            candidates.len(),
            probs.rows(),
            probs.cols()
        )));
    }
    if probs.data().iter().any(|&p| !(0.0 < p && p < 1.0)) {
        return Err(AugmentorError::Contract(
            "every edge probability must lie strictly inside (0, 1)".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = candidates.len();
    let noise_logit = DenseMatrix::from_fn(e, 1, |_, _| {
        let u: f64 = rng.gen_range(PROB_FLOOR..1.0 - PROB_FLOOR);
        (u / (1.0 - u)).ln()
    });

    let ones = tape.constant(DenseMatrix::filled(e, 1, 1.0));
    let log_p = tape.log(probabilities)?;
    let complement = tape.sub(ones, probabilities)?;
    let log_q = tape.log(complement)?;
    let logit_p = tape.sub(log_p, log_q)?;
    let noise = tape.constant(noise_logit);
    let jittered = tape.add(logit_p, noise)?;
    let sharpened = tape.scale(jittered, 1.0 / params.temperature)?;
    let soft = tape.sigmoid(sharpened)?;

    let soft_values = tape.value(soft);
    let kept: Vec<usize> =
        (0..e).filter(|&k| soft_values.get(k, 0) > params.threshold).collect();

    let (pattern, values) =
        assemble_soft_adjacency(tape, soft, candidates, &kept, n_users, n_items)?;
    Ok(AugmentedView { candidates: candidates.to_vec(), soft, kept, pattern, values, seed })
}

/// Builds the `(I+J) x (I+J)` normalized adjacency of the kept edges. Each
/// kept edge contributes its soft weight scaled by `1/sqrt(d_u * d_v)` in
/// both directions; diagonals are `1/d_n`. Degrees count kept edges plus the
/// self-loop, treated as constants of the sampled structure, so gradients
/// flow through the per-edge weight factor only.
fn assemble_soft_adjacency(
    tape: &mut Tape,
    soft: NodeId,
    candidates: &[(usize, usize)],
    kept: &[usize],
    n_users: usize,
    n_items: usize,
) -> Result<(Arc<SparsePattern>, NodeId), AugmentorError> {
    let n = n_users + n_items;
    let mut degree = vec![1.0f64; n];
    for &k in kept {
        let (u, v) = candidates[k];
        degree[u] += 1.0;
        degree[n_users + v] += 1.0;
    }

    // Per row: (column, source edge or diagonal, coefficient).
    const DIAGONAL: usize = usize::MAX;
    let mut rows: Vec<Vec<(usize, usize, f64)>> = (0..n)
        .map(|node| vec![(node, DIAGONAL, 1.0 / degree[node])])
        .collect();
    for &k in kept {
        let (u, v) = candidates[k];
        let coeff = 1.0 / (degree[u] * degree[n_users + v]).sqrt();
        rows[u].push((n_users + v, k, coeff));
        rows[n_users + v].push((u, k, coeff));
    }

    let e = candidates.len();
    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::new();
    let mut gather_src = Vec::new();
    let mut coeffs = Vec::new();
    row_offsets.push(0);
    for row in &mut rows {
        row.sort_unstable_by_key(|&(col, _, _)| col);
        for &(col, src, coeff) in row.iter() {
            col_indices.push(col);
            // Diagonal slots gather the constant 1.0 appended after the soft
            // weights; edge slots gather their soft weight.
            gather_src.push(if src == DIAGONAL { e } else { src });
            coeffs.push(coeff);
        }
        row_offsets.push(col_indices.len());
    }
    let pattern = Arc::new(SparsePattern::new(n, n, row_offsets, col_indices)?);

    let one = tape.constant(DenseMatrix::filled(1, 1, 1.0));
    let padded = tape.concat_rows(&[soft, one])?;
    let gathered = tape.gather_rows(padded, &gather_src)?;
    let coeff_node = tape.constant(DenseMatrix::new(pattern.nnz(), 1, coeffs)?);
    let values = tape.mul(gathered, coeff_node)?;
    Ok((pattern, values))
}
