//! Bipartite interaction data: ingestion, statistics, normalization, splits.
//!
//! Users and items arrive as opaque string ids and are re-indexed densely in
//! first-seen order. The graph the encoder consumes is the symmetric
//! `(I+J) x (I+J)` block matrix over users and items, Laplacian-normalized
//! with self-loops: `D^{-1/2} (A + I) D^{-1/2}`.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::rng;
use crate::tensor::{SparseMatrix, SparsePattern};

/// Errors from parsing, splitting, or serializing interaction data.
#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("dataset contains no interactions")]
    EmptyDataset,

    #[error("holdout fraction must lie in [0, 1], got {0}")]
    InvalidFraction(f64),

    #[error("edge ({user}, {item}) outside a {users}x{items} graph")]
    EdgeOutOfBounds { user: usize, item: usize, users: usize, items: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An implicit-feedback bipartite graph with dense user/item indices.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionGraph {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
    /// Items per user, each list sorted ascending and duplicate-free.
    user_items: Vec<Vec<usize>>,
    interactions: usize,
}

impl InteractionGraph {
    /// Builds a graph over `users x items` from dense-index pairs. Duplicate
    /// pairs collapse to one edge; ids become the decimal indices.
    pub fn from_edges(
        users: usize,
        items: usize,
        edges: &[(usize, usize)],
    ) -> Result<Self, GraphError> {
        let mut user_items = vec![Vec::new(); users];
        for &(u, v) in edges {
            if u >= users || v >= items {
                return Err(GraphError::EdgeOutOfBounds { user: u, item: v, users, items });
            }
            user_items[u].push(v);
        }
        let mut interactions = 0;
        for list in &mut user_items {
            list.sort_unstable();
            list.dedup();
            interactions += list.len();
        }
        let user_ids: Vec<String> = (0..users).map(|u| u.to_string()).collect();
        let item_ids: Vec<String> = (0..items).map(|v| v.to_string()).collect();
        Ok(Self {
            user_index: user_ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect(),
            item_index: item_ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect(),
            user_ids,
            item_ids,
            user_items,
            interactions,
        })
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Total node count `I + J` of the symmetric graph.
    pub fn n_nodes(&self) -> usize {
        self.n_users() + self.n_items()
    }

    pub fn n_interactions(&self) -> usize {
        self.interactions
    }

    /// Sorted items of one user.
    pub fn items_of(&self, user: usize) -> &[usize] {
        &self.user_items[user]
    }

    pub fn user_degree(&self, user: usize) -> usize {
        self.user_items[user].len()
    }

    /// Original id of a user index.
    pub fn user_id(&self, user: usize) -> &str {
        &self.user_ids[user]
    }

    pub fn item_id(&self, item: usize) -> &str {
        &self.item_ids[item]
    }

    pub fn has_edge(&self, user: usize, item: usize) -> bool {
        self.user_items[user].binary_search(&item).is_ok()
    }

    /// All edges as (user, item), sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.interactions);
        for (u, list) in self.user_items.iter().enumerate() {
            for &v in list {
                edges.push((u, v));
            }
        }
        edges
    }

    /// Reverse adjacency: users per item, sorted.
    pub fn users_of_items(&self) -> Vec<Vec<usize>> {
        let mut rev = vec![Vec::new(); self.n_items()];
        for (u, list) in self.user_items.iter().enumerate() {
            for &v in list {
                rev[v].push(u);
            }
        }
        rev
    }

    /// Per-item interaction counts.
    pub fn item_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.n_items()];
        for list in &self.user_items {
            for &v in list {
                deg[v] += 1;
            }
        }
        deg
    }
}

/// Summary counts plus density `E / (I * J)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density: f64,
}

/// Computes dataset summary statistics.
pub fn stats(graph: &InteractionGraph) -> DatasetStats {
    let users = graph.n_users();
    let items = graph.n_items();
    let interactions = graph.n_interactions();
    DatasetStats {
        users,
        items,
        interactions,
        density: interactions as f64 / (users as f64 * items as f64),
    }
}

/// Parses the line-oriented interaction format: one `user item` pair per
/// line, whitespace separated, `#` lines are comments. Duplicate pairs
/// collapse; ids are re-indexed densely in first-seen order.
pub fn ingest(reader: impl BufRead) -> Result<InteractionGraph, GraphError> {
    let mut user_ids: Vec<String> = Vec::new();
    let mut item_ids: Vec<String> = Vec::new();
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut pairs: Vec<(usize, usize)> = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        let (Some(user), Some(item), None) = (tokens.next(), tokens.next(), tokens.next()) else {
            return Err(GraphError::Parse {
                line: lineno + 1,
                detail: format!("expected `user item`, got {trimmed:?}"),
            });
        };
        let u = *user_index.entry(user.to_string()).or_insert_with(|| {
            user_ids.push(user.to_string());
            user_ids.len() - 1
        });
        let v = *item_index.entry(item.to_string()).or_insert_with(|| {
            item_ids.push(item.to_string());
            item_ids.len() - 1
        });
        pairs.push((u, v));
    }

    if pairs.is_empty() {
        return Err(GraphError::EmptyDataset);
    }

    let mut user_items = vec![Vec::new(); user_ids.len()];
    for (u, v) in pairs {
        user_items[u].push(v);
    }
    let mut interactions = 0;
    for list in &mut user_items {
        list.sort_unstable();
        list.dedup();
        interactions += list.len();
    }
    Ok(InteractionGraph { user_ids, item_ids, user_index, item_index, user_items, interactions })
}

/// The symmetric normalized adjacency with self-loops over `I + J` nodes.
///
/// Off-diagonal entries `(u, I+v)` and `(I+v, u)` hold `1/sqrt(d_u * d_v)`
/// and every diagonal entry holds `1/d_n`, where degrees count the self-loop.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    matrix: SparseMatrix,
    n_users: usize,
    n_items: usize,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn pattern(&self) -> &Arc<SparsePattern> {
        self.matrix.pattern()
    }

    pub fn values(&self) -> &[f64] {
        self.matrix.values()
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }
}

/// Builds `D^{-1/2} (A + I) D^{-1/2}` for the bipartite block matrix.
pub fn normalize_adjacency(graph: &InteractionGraph) -> NormalizedAdjacency {
    let i = graph.n_users();
    let n = graph.n_nodes();
    let mut degree = vec![1.0f64; n];
    for (u, list) in graph.user_items.iter().enumerate() {
        degree[u] += list.len() as f64;
        for &v in list {
            degree[i + v] += 1.0;
        }
    }
    let mut triplets = Vec::with_capacity(n + 2 * graph.n_interactions());
    for (node, d) in degree.iter().enumerate() {
        triplets.push((node, node, 1.0 / d));
    }
    for (u, list) in graph.user_items.iter().enumerate() {
        for &v in list {
            let w = 1.0 / (degree[u] * degree[i + v]).sqrt();
            triplets.push((u, i + v, w));
            triplets.push((i + v, u, w));
        }
    }
    let matrix = SparseMatrix::from_triplets(n, n, &triplets)
        .expect("normalized adjacency triplets are unique and in bounds");
    NormalizedAdjacency { matrix, n_users: i, n_items: graph.n_items() }
}

/// Held-out test interactions, one sorted item list per user.
#[derive(Clone, Debug, PartialEq)]
pub struct Holdout {
    items_by_user: Vec<Vec<usize>>,
}

impl Holdout {
    /// Builds a holdout from one item list per user; lists are sorted and
    /// deduplicated.
    pub fn new(mut items_by_user: Vec<Vec<usize>>) -> Self {
        for list in &mut items_by_user {
            list.sort_unstable();
            list.dedup();
        }
        Self { items_by_user }
    }

    pub fn items_of(&self, user: usize) -> &[usize] {
        &self.items_by_user[user]
    }

    pub fn n_users(&self) -> usize {
        self.items_by_user.len()
    }

    /// Total held-out interactions.
    pub fn len(&self) -> usize {
        self.items_by_user.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-user holdout split. Each user moves `floor(fraction * degree)` of its
/// interactions (never all of them) into the test set; users with a single
/// interaction keep it in train. Deterministic under the seed.
pub fn split(
    graph: &InteractionGraph,
    fraction: f64,
    seed: u64,
) -> Result<(InteractionGraph, Holdout), GraphError> {
    if !(0.0..=1.0).contains(&fraction) || !fraction.is_finite() {
        return Err(GraphError::InvalidFraction(fraction));
    }
    let mut rng = rng::stream(seed, "split", 0);
    let mut train_edges = Vec::with_capacity(graph.n_interactions());
    let mut test_lists = vec![Vec::new(); graph.n_users()];

    for (u, list) in graph.user_items.iter().enumerate() {
        let deg = list.len();
        let n_test = if deg < 2 { 0 } else { ((fraction * deg as f64).floor() as usize).min(deg - 1) };
        let mut shuffled = list.clone();
        partial_shuffle(&mut shuffled, n_test, &mut rng);
        let (test, train) = shuffled.split_at(n_test);
        let mut test = test.to_vec();
        test.sort_unstable();
        test_lists[u] = test;
        for &v in train {
            train_edges.push((u, v));
        }
    }

    let train = InteractionGraph::from_edges(graph.n_users(), graph.n_items(), &train_edges)?;
    Ok((train, Holdout { items_by_user: test_lists }))
}

/// Fisher-Yates on the first `k` positions only.
fn partial_shuffle(list: &mut [usize], k: usize, rng: &mut impl rand::Rng) {
    let n = list.len();
    for i in 0..k.min(n.saturating_sub(1)) {
        let j = rng.gen_range(i..n);
        list.swap(i, j);
    }
}

/// Writes the compact dense-index format: a header `I J E` then one `u v`
/// line per edge.
pub fn serialize(graph: &InteractionGraph, mut writer: impl Write) -> Result<(), GraphError> {
    writeln!(
        writer,
        "{} {} {}",
        graph.n_users(),
        graph.n_items(),
        graph.n_interactions()
    )?;
    for (u, v) in graph.edges() {
        writeln!(writer, "{u} {v}")?;
    }
    Ok(())
}

/// Reads the format produced by [`serialize`].
pub fn deserialize(reader: impl BufRead) -> Result<InteractionGraph, GraphError> {
    let mut lines = reader.lines().enumerate();
    let (users, items, expected) = loop {
        let Some((lineno, line)) = lines.next() else {
            return Err(GraphError::Parse { line: 1, detail: "missing `I J E` header".into() });
        };
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let parsed: Option<Vec<usize>> = fields.iter().map(|f| f.parse().ok()).collect();
        match parsed {
            Some(v) if v.len() == 3 => break (v[0], v[1], v[2]),
            _ => {
                return Err(GraphError::Parse {
                    line: lineno + 1,
                    detail: format!("expected header `I J E`, got {trimmed:?}"),
                })
            }
        }
    };

    let mut edges = Vec::with_capacity(expected);
    for (lineno, line) in lines {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        let pair = (
            tokens.next().and_then(|t| t.parse::<usize>().ok()),
            tokens.next().and_then(|t| t.parse::<usize>().ok()),
            tokens.next(),
        );
        let (Some(u), Some(v), None) = pair else {
            return Err(GraphError::Parse {
                line: lineno + 1,
                detail: format!("expected `u v` edge line, got {trimmed:?}"),
            });
        };
        if u >= users || v >= items {
            return Err(GraphError::Parse {
                line: lineno + 1,
                detail: format!("edge ({u}, {v}) outside the declared {users}x{items} graph"),
            });
        }
        edges.push((u, v));
    }
    if edges.len() != expected {
        return Err(GraphError::Parse {
            line: 1,
            detail: format!("header declares {expected} edges, found {}", edges.len()),
        });
    }
    InteractionGraph::from_edges(users, items, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn small_graph() -> InteractionGraph {
        let input = "# toy dataset\n\
                     alice item1\n\
                     alice item2\n\
                     bob item2\n\
                     bob item1\n\
                     alice item1\n";
        ingest(Cursor::new(input)).unwrap()
    }

    #[test]
    fn ingest_reindexes_and_collapses_duplicates() {
        let g = small_graph();
        assert_eq!(g.n_users(), 2);
        assert_eq!(g.n_items(), 2);
        assert_eq!(g.n_interactions(), 4);
        assert_eq!(g.user_id(0), "alice");
        assert_eq!(g.item_id(1), "item2");
        assert!(g.has_edge(0, 0) && g.has_edge(1, 1));
    }

    #[test]
    fn ingest_rejects_malformed_line_with_its_number() {
        let input = "a 1\nb\nc 3\n";
        let err = ingest(Cursor::new(input)).unwrap_err();
        match err {
            GraphError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_empty_input() {
        let err = ingest(Cursor::new("# nothing here\n\n")).unwrap_err();
        assert!(matches!(err, GraphError::EmptyDataset));
    }

    #[test]
    fn density_formats_to_two_significant_digits() {
        // The three published dataset rows and the densities they print as.
        let cases = [
            (50_821usize, 57_440usize, 1_172_425usize, "4.0e-4"),
            (49_611, 20_994, 169_909, "1.6e-4"),
            (56_027, 29_525, 256_036, "1.5e-4"),
        ];
        for (users, items, interactions, want) in cases {
            let density = interactions as f64 / (users as f64 * items as f64);
            assert_eq!(format!("{density:.1e}"), want);
        }
    }

    #[test]
    fn single_edge_normalization_is_all_halves() {
        let g = InteractionGraph::from_edges(1, 1, &[(0, 0)]).unwrap();
        let adj = normalize_adjacency(&g).matrix().to_dense();
        for i in 0..2 {
            for j in 0..2 {
                assert!((adj.get(i, j) - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adjacency_is_symmetric_with_inverse_degree_diagonal() {
        let g = InteractionGraph::from_edges(3, 4, &[(0, 0), (0, 1), (1, 1), (2, 3), (1, 2)])
            .unwrap();
        let adj = normalize_adjacency(&g);
        let dense = adj.matrix().to_dense();
        let n = g.n_nodes();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(dense.get(i, j).to_bits(), dense.get(j, i).to_bits());
            }
        }
        // User 0 has degree 2 (+1 self-loop), so its diagonal is 1/3.
        assert!((dense.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn adjacency_fixes_the_sqrt_degree_vector() {
        // D^{-1/2}(A+I)D^{-1/2} maps sqrt(d) to itself; a cheap spectral
        // sanity check on the normalization constants.
        let g = InteractionGraph::from_edges(4, 3, &[(0, 0), (1, 0), (1, 1), (2, 2), (3, 1)])
            .unwrap();
        let adj = normalize_adjacency(&g);
        let n = g.n_nodes();
        let mut degree = vec![1.0f64; n];
        for (u, v) in g.edges() {
            degree[u] += 1.0;
            degree[g.n_users() + v] += 1.0;
        }
        let sqrt_d =
            crate::tensor::DenseMatrix::from_fn(n, 1, |r, _| degree[r].sqrt());
        let mapped = adj.matrix().multiply(&sqrt_d).unwrap();
        for r in 0..n {
            assert!((mapped.get(r, 0) - sqrt_d.get(r, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn split_keeps_singletons_and_respects_fraction() {
        let mut edges = Vec::new();
        for v in 0..10 {
            edges.push((0, v));
        }
        edges.push((1, 0));
        let g = InteractionGraph::from_edges(2, 10, &edges).unwrap();
        let (train, test) = split(&g, 0.2, 7).unwrap();
        assert_eq!(test.items_of(0).len(), 2);
        assert_eq!(train.user_degree(0), 8);
        assert!(test.items_of(1).is_empty());
        assert_eq!(train.user_degree(1), 1);
    }

    #[test]
    fn split_is_deterministic_and_partitions_edges() {
        let g = small_graph();
        let (train_a, test_a) = split(&g, 0.5, 11).unwrap();
        let (train_b, test_b) = split(&g, 0.5, 11).unwrap();
        assert_eq!(train_a, train_b);
        assert_eq!(test_a, test_b);
        // Union of train and test reconstructs the original edge set.
        let mut rebuilt = train_a.edges();
        for u in 0..g.n_users() {
            for &v in test_a.items_of(u) {
                assert!(!train_a.has_edge(u, v), "edge ({u}, {v}) in both halves");
                rebuilt.push((u, v));
            }
        }
        rebuilt.sort_unstable();
        assert_eq!(rebuilt, g.edges());
    }

    #[test]
    fn split_rejects_fraction_outside_unit_interval() {
        let g = small_graph();
        assert!(matches!(split(&g, -0.1, 1), Err(GraphError::InvalidFraction(_))));
        assert!(matches!(split(&g, 1.5, 1), Err(GraphError::InvalidFraction(_))));
    }

    #[test]
    fn serialize_round_trips() {
        let g = InteractionGraph::from_edges(3, 5, &[(0, 4), (1, 0), (2, 2), (0, 1)]).unwrap();
        let mut buf = Vec::new();
        serialize(&g, &mut buf).unwrap();
        let back = deserialize(Cursor::new(buf)).unwrap();
        assert_eq!(back.n_users(), 3);
        assert_eq!(back.n_items(), 5);
        assert_eq!(back.edges(), g.edges());
    }

    #[test]
    fn deserialize_rejects_edge_count_mismatch() {
        let err = deserialize(Cursor::new("2 2 3\n0 0\n1 1\n")).unwrap_err();
        assert!(matches!(err, GraphError::Parse { .. }));
    }
}
