//! Synthetic interaction data with known structure.
//!
//! The block dataset plants a community signal a recommender should be able
//! to recover: users and items are split into aligned blocks, in-block
//! interactions appear with fixed probability, and an optional fraction of
//! uniformly random extra interactions acts as label noise.

use rand::Rng;

use crate::graph::InteractionGraph;
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("synthetic data configuration: {0}")]
    Config(String),
}

/// Generates a planted-block interaction graph. Every user gets at least
/// one in-block interaction so each appears in training. `noise` adds
/// `floor(noise * |clean edges|)` uniformly random absent pairs.
pub fn block_dataset(
    users: usize,
    items: usize,
    blocks: usize,
    p_in: f64,
    noise: f64,
    seed: u64,
) -> Result<InteractionGraph, SynthError> {
    if users == 0 || items == 0 {
        return Err(SynthError::Config("need at least one user and one item".into()));
    }
    if blocks == 0 || blocks > users.min(items) {
        return Err(SynthError::Config(format!(
            "block count must lie in 1..={}, got {blocks}",
            users.min(items)
        )));
    }
    if !(0.0..=1.0).contains(&p_in) {
        return Err(SynthError::Config(format!(
            "in-block probability must lie in [0, 1], got {p_in}"
        )));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(SynthError::Config(format!(
            "noise fraction must lie in [0, 1], got {noise}"
        )));
    }

    let user_block = |u: usize| u * blocks / users;
    let item_block = |v: usize| v * blocks / items;
    let mut rng = rng::stream(seed, "synth/block", 0);
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for u in 0..users {
        let before = edges.len();
        let block_items: Vec<usize> =
            (0..items).filter(|&v| item_block(v) == user_block(u)).collect();
        for &v in &block_items {
            if rng.gen::<f64>() < p_in {
                edges.push((u, v));
            }
        }
        if edges.len() == before {
            edges.push((u, block_items[rng.gen_range(0..block_items.len())]));
        }
    }

    let clean = edges.len();
    let target = (noise * clean as f64).floor() as usize;
    let mut present: std::collections::HashSet<(usize, usize)> =
        edges.iter().copied().collect();
    let mut added = 0;
    let mut attempts = 0usize;
    let budget = 100 * target + 1000;
    while added < target && attempts < budget {
        attempts += 1;
        let pair = (rng.gen_range(0..users), rng.gen_range(0..items));
        if present.insert(pair) {
            edges.push(pair);
            added += 1;
        }
    }
    if added < target {
        return Err(SynthError::Config(format!(
            "could not place {target} noise edges; the graph is nearly complete"
        )));
    }

    InteractionGraph::from_edges(users, items, &edges)
        .map_err(|e| SynthError::Config(e.to_string()))
}

/// Generates a uniform bipartite graph with exactly `edges` distinct
/// interactions and every user incident to at least one of them.
pub fn random_bipartite(
    users: usize,
    items: usize,
    edges: usize,
    seed: u64,
) -> Result<InteractionGraph, SynthError> {
    if users == 0 || items == 0 {
        return Err(SynthError::Config("need at least one user and one item".into()));
    }
    if edges < users || edges > users * items {
        return Err(SynthError::Config(format!(
            "edge count must lie in {users}..={}, got {edges}",
            users * items
        )));
    }
    let mut rng = rng::stream(seed, "synth/uniform", 0);
    let mut present = std::collections::HashSet::with_capacity(edges);
    let mut list = Vec::with_capacity(edges);
    for u in 0..users {
        let pair = (u, rng.gen_range(0..items));
        present.insert(pair);
        list.push(pair);
    }
    while list.len() < edges {
        let pair = (rng.gen_range(0..users), rng.gen_range(0..items));
        if present.insert(pair) {
            list.push(pair);
        }
    }
    InteractionGraph::from_edges(users, items, &list)
        .map_err(|e| SynthError::Config(e.to_string()))
}
