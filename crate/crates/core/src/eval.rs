//! Ranking evaluation, robustness studies, and ablations.
//!
//! Evaluation scores every user's unseen items by embedding inner product,
//! ranks them deterministically (score descending, item index ascending on
//! ties), and reports Recall@K and NDCG@K against a held-out interaction
//! set. On top of that sit the experiment protocols: component ablations,
//! label-noise robustness with relative degradation, degree-grouped
//! metrics, and hyperparameter sweeps.

use std::collections::BTreeMap;

use rand::Rng;

use crate::encoder::mad;
use crate::graph::{normalize_adjacency, GraphError, Holdout, InteractionGraph};
use crate::rng;
use crate::tensor::{DenseMatrix, TensorError};
use crate::trainer::{train, EpochRecord, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("evaluation configuration: {0}")]
    Config(String),

    #[error("evaluation contract: {0}")]
    Contract(String),

    #[error(transparent)]
    Train(#[from] TrainError),

    #[error(transparent)]
    Graph(#[from] GraphError),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Mean ranking quality over the evaluated users.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingReport {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    /// Users with at least one held-out interaction.
    pub evaluated_users: usize,
    /// Users without held-out interactions, skipped entirely.
    pub skipped_users: usize,
}

/// One user's ranked held-out items: `(item, rank)` with zero-based ranks
/// within the user's candidate list.
#[derive(Clone, Debug)]
struct UserHits {
    user: usize,
    test_count: usize,
    hits: Vec<(usize, usize)>,
}

fn validate_eval_inputs(
    embeddings: &DenseMatrix,
    train_graph: &InteractionGraph,
    holdout: &Holdout,
    ks: &[usize],
) -> Result<usize, EvalError> {
    if ks.is_empty() || ks.iter().any(|&k| k == 0) {
        return Err(EvalError::Config("cutoff list must be non-empty and positive".into()));
    }
    if embeddings.rows() != train_graph.n_nodes() {
        return Err(EvalError::Contract(format!(
            "embeddings have {} rows for a graph with {} nodes",
            embeddings.rows(),
            train_graph.n_nodes()
        )));
    }
    if holdout.n_users() != train_graph.n_users() {
        return Err(EvalError::Contract(format!(
            "holdout covers {} users, the graph has {}",
            holdout.n_users(),
            train_graph.n_users()
        )));
    }
    if holdout.is_empty() {
        return Err(EvalError::Contract("holdout has no interactions".into()));
    }
    Ok(*ks.iter().max().expect("cutoff list is non-empty"))
}

/// Ranks each evaluated user's candidates (items absent from their training
/// interactions) and records which held-out items land in the top `max_k`.
fn collect_hits(
    embeddings: &DenseMatrix,
    train_graph: &InteractionGraph,
    holdout: &Holdout,
    max_k: usize,
) -> Vec<UserHits> {
    let n_users = train_graph.n_users();
    let n_items = train_graph.n_items();
    let d = embeddings.cols();
    let mut out = Vec::new();
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(n_items);

    for u in 0..n_users {
        let test = holdout.items_of(u);
        if test.is_empty() {
            continue;
        }
        scored.clear();
        let user_row = embeddings.row(u);
        for v in 0..n_items {
            if train_graph.has_edge(u, v) {
                continue;
            }
            let item_row = embeddings.row(n_users + v);
            let score: f64 = (0..d).map(|c| user_row[c] * item_row[c]).sum();
            scored.push((score, v));
        }
        scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let hits = scored
            .iter()
            .take(max_k)
            .enumerate()
            .filter(|(_, &(_, item))| test.binary_search(&item).is_ok())
            .map(|(rank, &(_, item))| (item, rank))
            .collect();
        out.push(UserHits { user: u, test_count: test.len(), hits });
    }
    out
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 2) as f64).log2()
}

fn user_recall(hits: &UserHits, k: usize) -> f64 {
    let got = hits.hits.iter().filter(|&&(_, rank)| rank < k).count();
    got as f64 / hits.test_count as f64
}

fn user_ndcg(hits: &UserHits, k: usize) -> f64 {
    let dcg: f64 =
        hits.hits.iter().filter(|&&(_, rank)| rank < k).map(|&(_, rank)| discount(rank)).sum();
    let ideal: f64 = (0..k.min(hits.test_count)).map(discount).sum();
    dcg / ideal
}

/// Recall@K and NDCG@K of the embeddings against the holdout, averaged over
/// users with held-out interactions. Items the user interacted with in
/// training are excluded from their ranking.
pub fn rank_metrics(
    embeddings: &DenseMatrix,
    train_graph: &InteractionGraph,
    holdout: &Holdout,
    ks: &[usize],
) -> Result<RankingReport, EvalError> {
    let max_k = validate_eval_inputs(embeddings, train_graph, holdout, ks)?;
    let per_user = collect_hits(embeddings, train_graph, holdout, max_k);
    let evaluated = per_user.len();
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        let r: f64 = per_user.iter().map(|h| user_recall(h, k)).sum();
        let n: f64 = per_user.iter().map(|h| user_ndcg(h, k)).sum();
        recall.insert(k, r / evaluated as f64);
        ndcg.insert(k, n / evaluated as f64);
    }
    Ok(RankingReport {
        recall,
        ndcg,
        evaluated_users: evaluated,
        skipped_users: train_graph.n_users() - evaluated,
    })
}

/// Adds `floor(ratio * E)` uniformly random absent interactions to the
/// graph. Fails when the graph is too dense to place them.
pub fn inject_noise(
    graph: &InteractionGraph,
    ratio: f64,
    seed: u64,
) -> Result<InteractionGraph, EvalError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(EvalError::Config(format!(
            "noise ratio must lie in [0, 1], got {ratio}"
        )));
    }
    let target = (ratio * graph.n_interactions() as f64).floor() as usize;
    let mut edges = graph.edges();
    let mut present: std::collections::HashSet<(usize, usize)> = edges.iter().copied().collect();
    let mut rng = rng::stream(seed, "noise", 0);
    let mut added = 0;
    let mut attempts = 0usize;
    let budget = 100 * target + 1000;
    while added < target && attempts < budget {
        attempts += 1;
        let pair = (rng.gen_range(0..graph.n_users()), rng.gen_range(0..graph.n_items()));
        if present.insert(pair) {
            edges.push(pair);
            added += 1;
        }
    }
    if added < target {
        return Err(EvalError::Contract(format!(
            "could not place {target} noise interactions; the graph is nearly complete"
        )));
    }
    Ok(InteractionGraph::from_edges(graph.n_users(), graph.n_items(), &edges)?)
}

/// Degree-bucketing axis for grouped evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupAxis {
    /// Bucket users by training degree; metrics average over the bucket's
    /// users as in [`rank_metrics`].
    Users,
    /// Bucket items by training degree; hits are attributed to the bucket
    /// holding the item, recall is the fraction of the bucket's held-out
    /// interactions retrieved, and the gain of a hit at rank r is
    /// `1/log2(r+2)` against an ideal of 1 per interaction.
    Items,
}

impl std::fmt::Display for GroupAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GroupAxis::Users => "users",
            GroupAxis::Items => "items",
        })
    }
}

impl std::str::FromStr for GroupAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "users" => Ok(GroupAxis::Users),
            "items" => Ok(GroupAxis::Items),
            other => Err(format!("unknown group axis {other:?}, expected users or items")),
        }
    }
}

/// Metrics of one degree bucket `[lo, hi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub lo: usize,
    pub hi: usize,
    /// Evaluated users (user axis) or held-out interactions (item axis).
    pub members: usize,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

impl GroupReport {
    pub fn label(&self) -> String {
        format!("{}-{}", self.lo, self.hi)
    }
}

/// Grouped ranking metrics over left-closed, right-open degree buckets.
/// Buckets without members are omitted from the result.
pub fn group_eval(
    embeddings: &DenseMatrix,
    train_graph: &InteractionGraph,
    holdout: &Holdout,
    axis: GroupAxis,
    boundaries: &[usize],
    ks: &[usize],
) -> Result<Vec<GroupReport>, EvalError> {
    let max_k = validate_eval_inputs(embeddings, train_graph, holdout, ks)?;
    if boundaries.len() < 2 || boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::Config(format!(
            "bucket boundaries must be strictly increasing with at least two entries, got {boundaries:?}"
        )));
    }
    let per_user = collect_hits(embeddings, train_graph, holdout, max_k);
    let item_degrees = train_graph.item_degrees();
    let mut reports = Vec::new();

    for w in boundaries.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        match axis {
            GroupAxis::Users => {
                let members: Vec<&UserHits> = per_user
                    .iter()
                    .filter(|h| {
                        let deg = train_graph.user_degree(h.user);
                        lo <= deg && deg < hi
                    })
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let mut recall = BTreeMap::new();
                let mut ndcg = BTreeMap::new();
                for &k in ks {
                    let r: f64 = members.iter().map(|h| user_recall(h, k)).sum();
                    let n: f64 = members.iter().map(|h| user_ndcg(h, k)).sum();
                    recall.insert(k, r / members.len() as f64);
                    ndcg.insert(k, n / members.len() as f64);
                }
                reports.push(GroupReport { lo, hi, members: members.len(), recall, ndcg });
            }
            GroupAxis::Items => {
                let in_bucket = |item: usize| {
                    let deg = item_degrees[item];
                    lo <= deg && deg < hi
                };
                let mut total = 0usize;
                for u in 0..train_graph.n_users() {
                    total += holdout.items_of(u).iter().filter(|&&v| in_bucket(v)).count();
                }
                if total == 0 {
                    continue;
                }
                let mut recall = BTreeMap::new();
                let mut ndcg = BTreeMap::new();
                for &k in ks {
                    let mut got = 0usize;
                    let mut gain = 0.0f64;
                    for h in &per_user {
                        for &(item, rank) in &h.hits {
                            if rank < k && in_bucket(item) {
                                got += 1;
                                gain += discount(rank);
                            }
                        }
                    }
                    recall.insert(k, got as f64 / total as f64);
                    ndcg.insert(k, gain / total as f64);
                }
                reports.push(GroupReport { lo, hi, members: total, recall, ndcg });
            }
        }
    }
    Ok(reports)
}

/// Model variants for component ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    /// Single-hop propagation instead of the mixed hop set.
    WithoutMixhop,
    /// Bottleneck weight zeroed.
    WithoutGib,
    /// Contrastive weight zeroed.
    WithoutCl,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::WithoutMixhop,
        AblationVariant::WithoutGib,
        AblationVariant::WithoutCl,
    ];

    /// The base configuration with this variant's component removed.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::WithoutMixhop => cfg.hops = vec![1],
            AblationVariant::WithoutGib => cfg.beta1 = 0.0,
            AblationVariant::WithoutCl => cfg.beta2 = 0.0,
        }
        cfg
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationVariant::Full => "full",
            AblationVariant::WithoutMixhop => "w/o-mixhop",
            AblationVariant::WithoutGib => "w/o-gib",
            AblationVariant::WithoutCl => "w/o-cl",
        })
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(AblationVariant::Full),
            "w/o-mixhop" => Ok(AblationVariant::WithoutMixhop),
            "w/o-gib" => Ok(AblationVariant::WithoutGib),
            "w/o-cl" => Ok(AblationVariant::WithoutCl),
            other => Err(format!(
                "unknown variant {other:?}, expected full, w/o-mixhop, w/o-gib, or w/o-cl"
            )),
        }
    }
}

/// Trains a configuration and evaluates it against the holdout. Returns the
/// report, the oversmoothing score (mean average distance over all final
/// embedding rows), the final embeddings, and the training log.
pub fn train_and_eval(
    train_graph: &InteractionGraph,
    holdout: &Holdout,
    config: &TrainConfig,
    ks: &[usize],
) -> Result<(RankingReport, f64, DenseMatrix, Vec<EpochRecord>), EvalError> {
    let outcome = train(train_graph, config)?;
    let adjacency = normalize_adjacency(train_graph);
    let embeddings = outcome.params.final_embeddings(&adjacency)?;
    let report = rank_metrics(&embeddings, train_graph, holdout, ks)?;
    let spread = mad(&embeddings)?;
    Ok((report, spread, embeddings, outcome.log))
}

/// One trained and evaluated ablation variant.
#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub variant: AblationVariant,
    pub report: RankingReport,
    /// Mean average distance of the final embeddings.
    pub mad: f64,
}

/// Trains every variant on the same split with the same seed and evaluates
/// them against the shared holdout.
pub fn run_ablation(
    train_graph: &InteractionGraph,
    holdout: &Holdout,
    base: &TrainConfig,
    variants: &[AblationVariant],
    ks: &[usize],
) -> Result<Vec<AblationOutcome>, EvalError> {
    if variants.is_empty() {
        return Err(EvalError::Config("variant list is empty".into()));
    }
    let mut out = Vec::with_capacity(variants.len());
    for &variant in variants {
        let cfg = variant.apply(base);
        let (report, spread, _, _) = train_and_eval(train_graph, holdout, &cfg, ks)?;
        out.push(AblationOutcome { variant, report, mad: spread });
    }
    Ok(out)
}

/// One (variant, noise ratio) cell of the robustness study.
#[derive(Clone, Debug)]
pub struct NoiseCell {
    pub variant: AblationVariant,
    pub ratio: f64,
    pub report: RankingReport,
    /// Relative degradation `(clean - noisy) / clean` of recall, per cutoff.
    pub degradation: BTreeMap<usize, f64>,
}

/// Robustness study: clean baselines plus noisy retrainings.
#[derive(Clone, Debug)]
pub struct NoiseStudy {
    pub clean: Vec<(AblationVariant, RankingReport)>,
    pub cells: Vec<NoiseCell>,
}

/// Trains each variant on the clean training graph and on noisy copies with
/// the given injected-noise ratios, evaluating everything against the same
/// holdout.
pub fn run_noise_study(
    train_graph: &InteractionGraph,
    holdout: &Holdout,
    base: &TrainConfig,
    variants: &[AblationVariant],
    ratios: &[f64],
    ks: &[usize],
    noise_seed: u64,
) -> Result<NoiseStudy, EvalError> {
    if variants.is_empty() || ratios.is_empty() {
        return Err(EvalError::Config("variant and ratio lists must be non-empty".into()));
    }
    let mut clean = Vec::with_capacity(variants.len());
    for &variant in variants {
        let cfg = variant.apply(base);
        let (report, _, _, _) = train_and_eval(train_graph, holdout, &cfg, ks)?;
        clean.push((variant, report));
    }
    let mut cells = Vec::with_capacity(variants.len() * ratios.len());
    for (r_idx, &ratio) in ratios.iter().enumerate() {
        let noisy = inject_noise(train_graph, ratio, rng::substream_seed(noise_seed, "study", r_idx as u64))?;
        for (v_idx, &variant) in variants.iter().enumerate() {
            let cfg = variant.apply(base);
            let (report, _, _, _) = train_and_eval(&noisy, holdout, &cfg, ks)?;
            let clean_report = &clean[v_idx].1;
            let mut degradation = BTreeMap::new();
            for (&k, &clean_recall) in &clean_report.recall {
                let noisy_recall = report.recall[&k];
                let rel = if clean_recall > 0.0 {
                    (clean_recall - noisy_recall) / clean_recall
                } else {
                    0.0
                };
                degradation.insert(k, rel);
            }
            cells.push(NoiseCell { variant, ratio, report, degradation });
        }
    }
    Ok(NoiseStudy { clean, cells })
}

/// Hyperparameter selected by a sweep protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParameter {
    Temperature,
    GumbelTemperature,
    Threshold,
    KeepProb,
    Beta1,
    Beta2,
    LearningRate,
}

impl SweepParameter {
    pub fn apply(&self, base: &TrainConfig, value: f64) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            SweepParameter::Temperature => cfg.temperature = value,
            SweepParameter::GumbelTemperature => cfg.gumbel_temperature = value,
            SweepParameter::Threshold => cfg.threshold = value,
            SweepParameter::KeepProb => cfg.keep_prob = value,
            SweepParameter::Beta1 => cfg.beta1 = value,
            SweepParameter::Beta2 => cfg.beta2 = value,
            SweepParameter::LearningRate => cfg.learning_rate = value,
        }
        cfg
    }
}

impl std::fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParameter::Temperature => "temperature",
            SweepParameter::GumbelTemperature => "gumbel-temperature",
            SweepParameter::Threshold => "threshold",
            SweepParameter::KeepProb => "keep-prob",
            SweepParameter::Beta1 => "beta1",
            SweepParameter::Beta2 => "beta2",
            SweepParameter::LearningRate => "learning-rate",
        })
    }
}

impl std::str::FromStr for SweepParameter {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "temperature" => Ok(SweepParameter::Temperature),
            "gumbel-temperature" => Ok(SweepParameter::GumbelTemperature),
            "threshold" => Ok(SweepParameter::Threshold),
            "keep-prob" => Ok(SweepParameter::KeepProb),
            "beta1" => Ok(SweepParameter::Beta1),
            "beta2" => Ok(SweepParameter::Beta2),
            "learning-rate" => Ok(SweepParameter::LearningRate),
            other => Err(format!("unknown sweep parameter {other:?}")),
        }
    }
}

/// One swept value and its evaluation.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub value: f64,
    pub report: RankingReport,
}

/// Retrains the base configuration once per swept value.
pub fn run_sweep(
    train_graph: &InteractionGraph,
    holdout: &Holdout,
    base: &TrainConfig,
    parameter: SweepParameter,
    values: &[f64],
    ks: &[usize],
) -> Result<Vec<SweepCell>, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Config("sweep value list is empty".into()));
    }
    let mut out = Vec::with_capacity(values.len());
    for &value in values {
        let cfg = parameter.apply(base, value);
        let (report, _, _, _) = train_and_eval(train_graph, holdout, &cfg, ks)?;
        out.push(SweepCell { value, report });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::split;
    use crate::synth::block_dataset;

    /// Embeddings crafted so user u's score for item v is `scores[u][v]`:
    /// user rows hold the score table, item rows are indicator vectors.
    fn planted_embeddings(scores: &[Vec<f64>], n_items: usize) -> DenseMatrix {
        let n_users = scores.len();
        DenseMatrix::from_fn(n_users + n_items, n_items, |r, c| {
            if r < n_users {
                scores[r][c]
            } else if r - n_users == c {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn recall_and_ndcg_match_hand_computation() {
        let g = InteractionGraph::from_edges(2, 4, &[(0, 0), (1, 1)]).unwrap();
        let holdout = Holdout::new(vec![vec![1, 2], vec![0]]);
        let emb = planted_embeddings(
            &[vec![9.0, 5.0, 3.0, 4.0], vec![2.0, 9.0, 7.0, 8.0]],
            4,
        );
        // User 0 ranks candidates {1, 3, 2}; hits at ranks 0 and 2.
        // User 1 ranks candidates {3, 2, 0}; hit at rank 2.
        let report = rank_metrics(&emb, &g, &holdout, &[2, 3]).unwrap();
        assert_eq!(report.evaluated_users, 2);
        assert_eq!(report.skipped_users, 0);
        assert!((report.recall[&2] - 0.25).abs() < 1e-12);
        assert!((report.recall[&3] - 1.0).abs() < 1e-12);
        let idcg2 = 1.0 + 1.0 / 3f64.log2();
        let want_ndcg2 = (1.0 / idcg2 + 0.0) / 2.0;
        assert!((report.ndcg[&2] - want_ndcg2).abs() < 1e-12);
        let want_ndcg3 = ((1.0 + 0.5) / idcg2 + 0.5 / 1.0) / 2.0;
        assert!((report.ndcg[&3] - want_ndcg3).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_ascending_item_index() {
        let g = InteractionGraph::from_edges(1, 4, &[(0, 0)]).unwrap();
        let holdout = Holdout::new(vec![vec![3]]);
        // All candidates score identically, so the ranking is 1, 2, 3.
        let emb = planted_embeddings(&[vec![0.5, 0.5, 0.5, 0.5]], 4);
        let report = rank_metrics(&emb, &g, &holdout, &[1, 2, 3]).unwrap();
        assert_eq!(report.recall[&1], 0.0);
        assert_eq!(report.recall[&2], 0.0);
        assert_eq!(report.recall[&3], 1.0);
    }

    #[test]
    fn training_items_never_appear_in_rankings() {
        let g = InteractionGraph::from_edges(1, 3, &[(0, 0)]).unwrap();
        let holdout = Holdout::new(vec![vec![2]]);
        // The training item has the overwhelming score; it must be skipped,
        // leaving items 1 and 2 with the holdout item in front.
        let emb = planted_embeddings(&[vec![100.0, 1.0, 2.0]], 3);
        let report = rank_metrics(&emb, &g, &holdout, &[1]).unwrap();
        assert_eq!(report.recall[&1], 1.0);
        assert_eq!(report.ndcg[&1], 1.0);
    }

    #[test]
    fn users_without_holdout_are_skipped_and_counted() {
        let g = InteractionGraph::from_edges(3, 3, &[(0, 0), (1, 1), (2, 2)]).unwrap();
        let holdout = Holdout::new(vec![vec![1], vec![], vec![]]);
        let emb = planted_embeddings(
            &[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]],
            3,
        );
        let report = rank_metrics(&emb, &g, &holdout, &[1]).unwrap();
        assert_eq!(report.evaluated_users, 1);
        assert_eq!(report.skipped_users, 2);
        assert_eq!(report.recall[&1], 1.0);
    }

    #[test]
    fn eval_rejects_broken_inputs() {
        let g = InteractionGraph::from_edges(2, 2, &[(0, 0), (1, 1)]).unwrap();
        let holdout = Holdout::new(vec![vec![1], vec![0]]);
        let emb = planted_embeddings(&[vec![0.1, 0.2], vec![0.3, 0.4]], 2);
        assert!(rank_metrics(&emb, &g, &holdout, &[]).is_err());
        assert!(rank_metrics(&emb, &g, &holdout, &[0]).is_err());
        let empty = Holdout::new(vec![vec![], vec![]]);
        assert!(rank_metrics(&emb, &g, &empty, &[1]).is_err());
        let wrong_rows = planted_embeddings(&[vec![0.1, 0.2]], 2);
        assert!(rank_metrics(&wrong_rows, &g, &holdout, &[1]).is_err());
    }

    #[test]
    fn noise_injection_adds_exactly_the_floor() {
        let g = block_dataset(20, 20, 2, 0.5, 0.0, 1).unwrap();
        let e = g.n_interactions();
        let noisy = inject_noise(&g, 0.15, 7).unwrap();
        assert_eq!(noisy.n_interactions(), e + (0.15 * e as f64).floor() as usize);
        // The original edges all survive.
        for (u, v) in g.edges() {
            assert!(noisy.has_edge(u, v));
        }
        let again = inject_noise(&g, 0.15, 7).unwrap();
        assert_eq!(noisy.edges(), again.edges());
        let other = inject_noise(&g, 0.15, 8).unwrap();
        assert_ne!(noisy.edges(), other.edges());
    }

    #[test]
    fn noise_injection_rejects_bad_ratios_and_full_graphs() {
        let g = block_dataset(10, 10, 1, 1.0, 0.0, 2).unwrap();
        assert!(inject_noise(&g, -0.1, 0).is_err());
        assert!(inject_noise(&g, 1.5, 0).is_err());
        // The single-block graph at p=1 is complete; nothing can be added.
        assert!(matches!(inject_noise(&g, 0.5, 0), Err(EvalError::Contract(_))));
    }

    #[test]
    fn user_groups_bucket_by_training_degree() {
        // Degrees: user 0 has 1, user 1 has 2, user 2 has 4.
        let g = InteractionGraph::from_edges(
            3,
            6,
            &[(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2), (2, 3)],
        )
        .unwrap();
        let holdout = Holdout::new(vec![vec![5], vec![5], vec![5]]);
        let emb = planted_embeddings(
            &[
                vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
                vec![0.0, 0.0, 0.0, 0.0, 2.0, 1.0],
                vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            ],
            6,
        );
        let groups =
            group_eval(&emb, &g, &holdout, GroupAxis::Users, &[0, 2, 4, 6], &[1]).unwrap();
        // Bucket [0,2) holds user 0, [2,4) user 1, [4,6) user 2.
        assert_eq!(groups.len(), 3);
        assert_eq!(groups[0].label(), "0-2");
        assert_eq!(groups[0].members, 1);
        assert_eq!(groups[0].recall[&1], 1.0);
        // User 1's top item is 4, not the held-out 5.
        assert_eq!(groups[1].recall[&1], 0.0);
        assert_eq!(groups[2].recall[&1], 1.0);
    }

    #[test]
    fn empty_buckets_are_absent() {
        let g = InteractionGraph::from_edges(2, 3, &[(0, 0), (1, 0), (1, 1)]).unwrap();
        let holdout = Holdout::new(vec![vec![2], vec![2]]);
        let emb = planted_embeddings(&[vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]], 3);
        let groups =
            group_eval(&emb, &g, &holdout, GroupAxis::Users, &[0, 1, 2, 3, 50], &[1]).unwrap();
        // Degrees are 1 and 2; buckets [0,1) and [3,50) have no users.
        let labels: Vec<String> = groups.iter().map(|g| g.label()).collect();
        assert_eq!(labels, vec!["1-2", "2-3"]);
    }

    #[test]
    fn item_groups_attribute_hits_to_the_items_bucket() {
        // Item degrees in train: item 0 -> 2, item 1 -> 1, item 2 -> 0.
        let g = InteractionGraph::from_edges(2, 3, &[(0, 0), (1, 0), (1, 1)]).unwrap();
        let holdout = Holdout::new(vec![vec![1, 2], vec![2]]);
        // User 0 candidates {1, 2} ranked 1 then 2; user 1 candidate {2}.
        let emb = planted_embeddings(&[vec![0.0, 5.0, 3.0], vec![0.0, 0.0, 1.0]], 3);
        let groups =
            group_eval(&emb, &g, &holdout, GroupAxis::Items, &[0, 1, 2], &[1, 2]).unwrap();
        // Bucket [0,1): item 2 only, two held-out pairs (both users).
        // Bucket [1,2): item 1 only, one held-out pair.
        assert_eq!(groups.len(), 2);
        let low = &groups[0];
        assert_eq!(low.label(), "0-1");
        assert_eq!(low.members, 2);
        // At K=1 only user 1's item-2 hit (rank 0) lands; user 0 ranks item
        // 2 second.
        assert!((low.recall[&1] - 0.5).abs() < 1e-12);
        assert!((low.ndcg[&1] - 0.5).abs() < 1e-12);
        // At K=2 user 0's rank-1 hit joins with discount 1/log2(3).
        assert!((low.recall[&2] - 1.0).abs() < 1e-12);
        assert!((low.ndcg[&2] - (1.0 + 1.0 / 3f64.log2()) / 2.0).abs() < 1e-12);
        let mid = &groups[1];
        assert_eq!(mid.members, 1);
        assert_eq!(mid.recall[&1], 1.0);
    }

    #[test]
    fn group_eval_validates_boundaries() {
        let g = InteractionGraph::from_edges(1, 2, &[(0, 0)]).unwrap();
        let holdout = Holdout::new(vec![vec![1]]);
        let emb = planted_embeddings(&[vec![0.0, 1.0]], 2);
        assert!(group_eval(&emb, &g, &holdout, GroupAxis::Users, &[5], &[1]).is_err());
        assert!(group_eval(&emb, &g, &holdout, GroupAxis::Users, &[5, 5], &[1]).is_err());
        assert!(group_eval(&emb, &g, &holdout, GroupAxis::Users, &[5, 2], &[1]).is_err());
    }

    #[test]
    fn variant_labels_round_trip_and_apply() {
        for v in AblationVariant::ALL {
            let parsed: AblationVariant = v.to_string().parse().unwrap();
            assert_eq!(parsed, v);
        }
        let base = TrainConfig::default();
        assert_eq!(AblationVariant::WithoutMixhop.apply(&base).hops, vec![1]);
        assert_eq!(AblationVariant::WithoutGib.apply(&base).beta1, 0.0);
        assert_eq!(AblationVariant::WithoutCl.apply(&base).beta2, 0.0);
        let full = AblationVariant::Full.apply(&base);
        assert_eq!(full, base);
        assert!("w/o-everything".parse::<AblationVariant>().is_err());
    }

    fn quick_config(seed: u64) -> TrainConfig {
        TrainConfig {
            d: 6,
            layers: 1,
            hops: vec![0, 1],
            epochs: 2,
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ablation_runs_every_variant_on_the_shared_split() {
        let g = block_dataset(16, 16, 2, 0.6, 0.0, 5).unwrap();
        let (train_g, holdout) = split(&g, 0.3, 5).unwrap();
        let outcomes =
            run_ablation(&train_g, &holdout, &quick_config(1), &AblationVariant::ALL, &[5])
                .unwrap();
        assert_eq!(outcomes.len(), 4);
        for o in &outcomes {
            assert!(o.report.recall[&5].is_finite());
            assert!(o.mad.is_finite() && o.mad >= 0.0 && o.mad <= 2.0);
        }
    }

    #[test]
    fn noise_study_covers_every_cell_with_degradation() {
        let g = block_dataset(16, 16, 2, 0.6, 0.0, 6).unwrap();
        let (train_g, holdout) = split(&g, 0.3, 6).unwrap();
        let variants = [AblationVariant::Full, AblationVariant::WithoutGib];
        let study = run_noise_study(
            &train_g,
            &holdout,
            &quick_config(2),
            &variants,
            &[0.1, 0.2],
            &[20, 40],
            99,
        )
        .unwrap();
        assert_eq!(study.clean.len(), 2);
        assert_eq!(study.cells.len(), 4);
        for cell in &study.cells {
            assert!(cell.degradation[&20].is_finite());
            // Degradation of a non-negative metric is at most 1.
            assert!(cell.degradation[&20] <= 1.0);
        }
    }

    #[test]
    fn sweep_retrains_per_value() {
        let g = block_dataset(14, 14, 2, 0.6, 0.0, 7).unwrap();
        let (train_g, holdout) = split(&g, 0.3, 7).unwrap();
        let cells = run_sweep(
            &train_g,
            &holdout,
            &quick_config(3),
            SweepParameter::Temperature,
            &[0.5, 0.9],
            &[5],
        )
        .unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].value, 0.5);
        assert!(cells[1].report.ndcg[&5].is_finite());
        assert!(
            "temperature".parse::<SweepParameter>().unwrap() == SweepParameter::Temperature
        );
        assert!(run_sweep(
            &train_g,
            &holdout,
            &quick_config(3),
            SweepParameter::Temperature,
            &[],
            &[5]
        )
        .is_err());
    }
}
