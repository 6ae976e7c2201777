//! Multi-hop message-passing encoder.
//!
//! One layer gathers several propagation depths at once: for each hop `m` in
//! the hop set, the layer input is propagated `m` times through the
//! normalized adjacency, linearly transformed by that hop's weight matrix,
//! and the per-hop blocks are concatenated before the leaky-relu activation.
//! Powers of the adjacency are applied iteratively (sparse product by sparse
//! product), so no densified power matrix ever exists.
//!
//! Mixing depths inside a layer is the engine's defense against
//! oversmoothing; the [`mad`] metric quantifies that effect as the mean
//! pairwise cosine distance between embedding rows.

use std::sync::Arc;

use rand::Rng;

use crate::tensor::{DenseMatrix, NodeId, SparsePattern, Tape, TensorError};

/// Errors from encoder configuration or the underlying tape.
#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("encoder configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How per-layer outputs combine into the final embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    /// Mean of the input embeddings and every layer output. The neutral
    /// default; requires all layers to preserve the embedding width.
    MeanOfLayers,
    /// The last layer output alone.
    LastLayer,
}

impl std::fmt::Display for Readout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Readout::MeanOfLayers => "mean",
            Readout::LastLayer => "last",
        })
    }
}

impl std::str::FromStr for Readout {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Readout::MeanOfLayers),
            "last" => Ok(Readout::LastLayer),
            other => Err(format!("unknown readout {other:?}, expected mean or last")),
        }
    }
}

/// Structural hyperparameters of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Propagation depths mixed per layer, strictly increasing. `[0, 1, 2]`
    /// mixes the identity, one-hop, and two-hop signals; `[1]` reduces the
    /// encoder to a vanilla message-passing network.
    pub hops: Vec<usize>,
    /// Number of stacked layers.
    pub layers: usize,
    /// Negative slope of the leaky-relu activation.
    pub slope: f64,
    pub readout: Readout,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.hops.is_empty() {
            return Err(EncoderError::Config("hop set must be non-empty".into()));
        }
        if self.hops.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EncoderError::Config("hop set must be strictly increasing".into()));
        }
        if self.layers == 0 {
            return Err(EncoderError::Config("layer count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.slope) {
            return Err(EncoderError::Config(format!(
                "leaky-relu slope must lie in [0, 1], got {}",
                self.slope
            )));
        }
        Ok(())
    }
}

/// Owned encoder weights: one transformation per layer per hop.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// `weights[l][k]` transforms the layer-`l` input for hop `hops[k]`.
    pub weights: Vec<Vec<DenseMatrix>>,
}

impl EncoderParams {
    /// Initializes width-preserving layers: every hop block maps `d` to
    /// `d / |hops|` so the concatenated layer output is `d`-wide again.
    /// Entries are uniform on `[-1/sqrt(d), 1/sqrt(d))`.
    pub fn init(
        d: usize,
        config: EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        if d == 0 || d % config.hops.len() != 0 {
            return Err(EncoderError::Config(format!(
                "embedding width {d} is not divisible by the hop count {}",
                config.hops.len()
            )));
        }
        let block = d / config.hops.len();
        let bound = 1.0 / (d as f64).sqrt();
        let weights = (0..config.layers)
            .map(|_| {
                (0..config.hops.len())
                    .map(|_| DenseMatrix::uniform(rng, d, block, -bound, bound))
                    .collect()
            })
            .collect();
        Ok(Self { config, weights })
    }

    /// Registers every weight matrix as a tape parameter, in layer-major
    /// order. The returned ids feed [`encode`].
    pub fn bind(&self, tape: &mut Tape) -> Vec<Vec<NodeId>> {
        self.weights
            .iter()
            .map(|layer| layer.iter().map(|w| tape.parameter(w.clone())).collect())
            .collect()
    }
}

/// Output of one encoder pass.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// The readout embedding.
    pub output: NodeId,
    /// The input followed by every layer output, so `levels[0]` is `h0` and
    /// `levels[L]` the deepest layer.
    pub levels: Vec<NodeId>,
}

/// Runs the encoder over an adjacency given as a constant pattern plus a
/// (possibly differentiable) nnz-by-1 value node. Gradients flow into `h0`,
/// the weights, and the adjacency values alike.
pub fn encode(
    tape: &mut Tape,
    pattern: &Arc<SparsePattern>,
    adj_values: NodeId,
    h0: NodeId,
    weights: &[Vec<NodeId>],
    config: &EncoderConfig,
) -> Result<Encoded, EncoderError> {
    config.validate()?;
    if weights.len() != config.layers {
        return Err(EncoderError::Config(format!(
            "{} weight layers supplied for {} configured layers",
            weights.len(),
            config.layers
        )));
    }
    let d = tape.value(h0).cols();
    let mut levels = vec![h0];
    let mut current = h0;
    for (l, layer_weights) in weights.iter().enumerate() {
        if layer_weights.len() != config.hops.len() {
            return Err(EncoderError::Config(format!(
                "layer {l} has {} hop weights for {} hops",
                layer_weights.len(),
                config.hops.len()
            )));
        }
        let mut blocks = Vec::with_capacity(config.hops.len());
        let mut propagated = current;
        let mut depth = 0;
        for (&hop, &w) in config.hops.iter().zip(layer_weights) {
            while depth < hop {
                propagated = tape.spmm(pattern.clone(), adj_values, propagated)?;
                depth += 1;
            }
            blocks.push(tape.matmul(propagated, w)?);
        }
        let cat = tape.concat_cols(&blocks)?;
        current = tape.leaky_relu(cat, config.slope)?;
        levels.push(current);
    }

    let output = match config.readout {
        Readout::LastLayer => current,
        Readout::MeanOfLayers => {
            if levels.iter().any(|&id| tape.value(id).cols() != d) {
                return Err(EncoderError::Config(format!(
                    "mean readout needs every layer output {d}-wide; got widths {:?}",
                    levels.iter().map(|&id| tape.value(id).cols()).collect::<Vec<_>>()
                )));
            }
            let mut acc = levels[0];
            for &id in &levels[1..] {
                acc = tape.add(acc, id)?;
            }
            tape.scale(acc, 1.0 / levels.len() as f64)?
        }
    };
    Ok(Encoded { output, levels })
}

/// Mean average distance: the mean over unordered row pairs of one minus
/// their cosine similarity. Ranges over `[0, 2]`; higher means less
/// oversmoothed. Rows with zero norm have no direction and are rejected.
pub fn mad(embeddings: &DenseMatrix) -> Result<f64, TensorError> {
    let n = embeddings.rows();
    if n < 2 {
        return Err(TensorError::Contract {
            op: "mad",
            detail: format!("needs at least two rows, got {n}"),
        });
    }
    let mut norms = Vec::with_capacity(n);
    for r in 0..n {
        let norm = embeddings.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= f64::MIN_POSITIVE {
            return Err(TensorError::ZeroNormRow { op: "mad", row: r });
        }
        norms.push(norm);
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = embeddings.row(i).iter().zip(embeddings.row(j)).map(|(a, b)| a * b).sum();
            total += 1.0 - dot / (norms[i] * norms[j]);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}
