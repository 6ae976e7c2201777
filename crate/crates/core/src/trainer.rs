//! End-to-end training loop.
//!
//! Each epoch rebuilds the computation graph from scratch: encode the clean
//! graph, sample two augmented views, assemble the joint objective, run one
//! backward pass, and apply one optimizer step. Randomness is drawn from
//! named sub-streams of a single master seed, so runs are reproducible and
//! disabling a component never shifts the draws of the others.

use rand::Rng;

use crate::augmentor::{
    candidate_edges, edge_probability, sample_view, AugmentorError, AugmentorParams,
    CandidatePolicy,
};
use crate::encoder::{encode, EncoderConfig, EncoderError, EncoderParams, Readout};
use crate::gib::{gib_objective, GibConfig, GibError};
use crate::graph::{normalize_adjacency, InteractionGraph, NormalizedAdjacency};
use crate::losses::{bpr, frobenius, infonce, joint_loss, NegativeMode, Triplet};
use crate::rng;
use crate::tensor::{DenseMatrix, NodeId, Tape, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training configuration: {0}")]
    Config(String),

    #[error("training data: {0}")]
    Data(String),

    #[error("epoch {epoch} failed: {detail}")]
    Epoch { epoch: usize, detail: String },
}

impl TrainError {
    fn at_epoch(epoch: usize) -> impl Fn(TrainStepError) -> TrainError {
        move |e| TrainError::Epoch { epoch, detail: e.to_string() }
    }
}

/// Internal union of the errors a single epoch can raise.
#[derive(Debug, thiserror::Error)]
enum TrainStepError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Augmentor(#[from] AugmentorError),
    #[error(transparent)]
    Gib(#[from] GibError),
}

/// Gradient step rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer {other:?}, expected sgd or adam")),
        }
    }
}

/// Which rows the contrastive loss contrasts against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NegativeScope {
    /// The users and items of the current triplet batch.
    #[default]
    InBatch,
    /// Every user against all users, every item against all items.
    Full,
}

impl std::fmt::Display for NegativeScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NegativeScope::InBatch => "in-batch",
            NegativeScope::Full => "full",
        })
    }
}

impl std::str::FromStr for NegativeScope {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "in-batch" => Ok(NegativeScope::InBatch),
            "full" => Ok(NegativeScope::Full),
            other => Err(format!("unknown negative scope {other:?}, expected in-batch or full")),
        }
    }
}

/// All training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Embedding width; must be divisible by the hop count, and even when
    /// the bottleneck term is active.
    pub d: usize,
    pub layers: usize,
    pub hops: Vec<usize>,
    pub slope: f64,
    pub readout: Readout,
    /// Contrastive temperature.
    pub temperature: f64,
    /// Concrete-relaxation temperature of the view sampler.
    pub gumbel_temperature: f64,
    /// Edge keep threshold of the view sampler.
    pub threshold: f64,
    /// Keep-probability of the augmentor's node feature masks.
    pub keep_prob: f64,
    /// Weight of the bottleneck objective.
    pub beta1: f64,
    /// Weight of the contrastive loss.
    pub beta2: f64,
    /// Weight of the Frobenius regularizer.
    pub beta3: f64,
    /// Inner bottleneck settings (KL weight, view averaging).
    pub gib: GibConfig,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied per epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    /// Triplets sampled per epoch.
    pub batch_size: usize,
    pub negatives: NegativeScope,
    pub optimizer: OptimizerKind,
    /// Fraction of extra two-hop candidate edges offered to the augmentor;
    /// zero restricts candidates to the observed edges.
    pub candidate_budget: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 30,
            layers: 2,
            hops: vec![0, 1, 2],
            slope: 0.5,
            readout: Readout::MeanOfLayers,
            temperature: 0.9,
            gumbel_temperature: 0.5,
            threshold: 0.2,
            keep_prob: 0.8,
            beta1: 1e-5,
            beta2: 1.0,
            beta3: 1e-7,
            gib: GibConfig::default(),
            learning_rate: 0.001,
            lr_decay: 0.96,
            epochs: 50,
            batch_size: 256,
            negatives: NegativeScope::InBatch,
            optimizer: OptimizerKind::Sgd,
            candidate_budget: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            hops: self.hops.clone(),
            layers: self.layers,
            slope: self.slope,
            readout: self.readout,
        }
    }

    /// True when augmented views are needed at all.
    pub fn uses_views(&self) -> bool {
        self.beta1 > 0.0 || self.beta2 > 0.0
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.encoder_config().validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if self.d == 0 || self.d % self.hops.len() != 0 {
            return Err(TrainError::Config(format!(
                "embedding width {} is not divisible by the hop count {}",
                self.d,
                self.hops.len()
            )));
        }
        if self.beta1 > 0.0 && self.d % 2 != 0 {
            return Err(TrainError::Config(format!(
                "the bottleneck split needs an even embedding width, got {}",
                self.d
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(TrainError::Config(format!(
                "contrastive temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2), ("beta3", self.beta3)]
        {
            if !(beta >= 0.0) {
                return Err(TrainError::Config(format!(
                    "{name} must be non-negative, got {beta}"
                )));
            }
        }
        self.gib.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0 < self.lr_decay && self.lr_decay <= 1.0) {
            return Err(TrainError::Config(format!(
                "learning-rate decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epoch count must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.candidate_budget) {
            return Err(TrainError::Config(format!(
                "candidate budget must lie in [0, 1], got {}",
                self.candidate_budget
            )));
        }
        // Sampler knob checks live with the augmentor.
        AugmentorParams {
            w1: DenseMatrix::zeros(1, 1),
            w2: DenseMatrix::zeros(1, 1),
            keep_prob: self.keep_prob,
            temperature: self.gumbel_temperature,
            threshold: self.threshold,
        }
        .validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    fn candidate_policy(&self) -> CandidatePolicy {
        if self.candidate_budget == 0.0 {
            CandidatePolicy::Observed
        } else {
            CandidatePolicy::TwoHop { budget: self.candidate_budget, seed: self.seed }
        }
    }
}

/// The trainable state: free embeddings, encoder weights, and the
/// augmentor's scoring MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embeddings: DenseMatrix,
    pub encoder: EncoderParams,
    pub augmentor: AugmentorParams,
    pub n_users: usize,
    pub n_items: usize,
}

/// Tape handles of one epoch's bound parameters.
struct BoundParams {
    h0: NodeId,
    encoder: Vec<Vec<NodeId>>,
    mlp: Option<crate::augmentor::MlpNodes>,
    /// Flat list in the same order as [`ModelParams::matrices_mut`].
    all: Vec<NodeId>,
}

impl ModelParams {
    pub fn init(
        graph: &InteractionGraph,
        config: &TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let d = config.d;
        let bound = 1.0 / (d as f64).sqrt();
        let mut emb_rng = rng::stream(config.seed, "init/embeddings", 0);
        let embeddings =
            DenseMatrix::uniform(&mut emb_rng, graph.n_nodes(), d, -bound, bound);
        let mut enc_rng = rng::stream(config.seed, "init/encoder", 0);
        let encoder = EncoderParams::init(d, config.encoder_config(), &mut enc_rng)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let mut aug_rng = rng::stream(config.seed, "init/augmentor", 0);
        let augmentor = AugmentorParams::init(
            d,
            config.keep_prob,
            config.gumbel_temperature,
            config.threshold,
            &mut aug_rng,
        )
        .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(Self {
            embeddings,
            encoder,
            augmentor,
            n_users: graph.n_users(),
            n_items: graph.n_items(),
        })
    }

    fn bind(&self, tape: &mut Tape, with_augmentor: bool) -> BoundParams {
        let h0 = tape.parameter(self.embeddings.clone());
        let encoder = self.encoder.bind(tape);
        let mut all = vec![h0];
        for layer in &encoder {
            all.extend_from_slice(layer);
        }
        let mlp = if with_augmentor {
            let nodes = self.augmentor.bind(tape);
            all.push(nodes.w1);
            all.push(nodes.w2);
            Some(nodes)
        } else {
            None
        };
        BoundParams { h0, encoder, mlp, all }
    }

    /// Mutable views of the trainable matrices, in the order [`bind`]
    /// registers them.
    fn matrices_mut(&mut self, with_augmentor: bool) -> Vec<&mut DenseMatrix> {
        let mut out: Vec<&mut DenseMatrix> = vec![&mut self.embeddings];
        for layer in &mut self.encoder.weights {
            out.extend(layer.iter_mut());
        }
        if with_augmentor {
            out.push(&mut self.augmentor.w1);
            out.push(&mut self.augmentor.w2);
        }
        out
    }

    /// Encodes the given graph with the current parameters and returns the
    /// readout embeddings as plain values.
    pub fn final_embeddings(
        &self,
        adjacency: &NormalizedAdjacency,
    ) -> Result<DenseMatrix, TrainError> {
        let mut tape = Tape::new();
        let h0 = tape.constant(self.embeddings.clone());
        let weights: Vec<Vec<NodeId>> = self
            .encoder
            .weights
            .iter()
            .map(|layer| layer.iter().map(|w| tape.constant(w.clone())).collect())
            .collect();
        let values =
            tape.constant(DenseMatrix::new(adjacency.values().len(), 1, adjacency.values().to_vec())
                .map_err(|e| TrainError::Data(e.to_string()))?);
        let out = encode(&mut tape, adjacency.pattern(), values, h0, &weights, &self.encoder.config)
            .map_err(|e| TrainError::Data(e.to_string()))?;
        Ok(tape.value(out.output).clone())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_bpr: f64,
    pub l_kl: f64,
    pub l_cl: f64,
    pub l_total: f64,
    pub lr: f64,
}

impl EpochRecord {
    pub const TSV_HEADER: &'static str = "epoch\tl_bpr\tl_kl\tl_cl\tl_total\tlr";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, self.l_bpr, self.l_kl, self.l_cl, self.l_total, self.lr
        )
    }

    pub fn from_tsv(line: &str) -> Result<Self, TrainError> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(TrainError::Data(format!(
                "epoch record needs 6 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64, TrainError> {
            s.parse().map_err(|_| TrainError::Data(format!("bad numeric field {s:?}")))
        };
        Ok(Self {
            epoch: fields[0]
                .parse()
                .map_err(|_| TrainError::Data(format!("bad epoch field {:?}", fields[0])))?,
            l_bpr: num(fields[1])?,
            l_kl: num(fields[2])?,
            l_cl: num(fields[3])?,
            l_total: num(fields[4])?,
            lr: num(fields[5])?,
        })
    }
}

/// A finished training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
}

/// Draws a batch of ranking triplets: a uniform user with at least one
/// interaction and at least one non-interaction, one of their items, and a
/// uniformly rejected negative item.
pub fn sample_triplets(
    graph: &InteractionGraph,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Triplet>, TrainError> {
    let n_items = graph.n_items();
    let eligible: Vec<usize> = (0..graph.n_users())
        .filter(|&u| graph.user_degree(u) >= 1 && graph.user_degree(u) < n_items)
        .collect();
    if eligible.is_empty() {
        return Err(TrainError::Data(
            "no user has both an observed and an unobserved item to rank".into(),
        ));
    }
    let mut rng = rng::stream(seed, "triplets", 0);
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let user = eligible[rng.gen_range(0..eligible.len())];
        let items = graph.items_of(user);
        let pos = items[rng.gen_range(0..items.len())];
        let neg = loop {
            let candidate = rng.gen_range(0..n_items);
            if !graph.has_edge(user, candidate) {
                break candidate;
            }
        };
        out.push(Triplet { user, pos, neg });
    }
    Ok(out)
}

fn sorted_unique(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

struct Optimizer {
    kind: OptimizerKind,
    /// Adam first and second moments per parameter matrix.
    moments: Vec<(DenseMatrix, DenseMatrix)>,
    steps: u64,
}

impl Optimizer {
    const ADAM_BETA1: f64 = 0.9;
    const ADAM_BETA2: f64 = 0.999;
    const ADAM_EPS: f64 = 1e-8;

    fn new(kind: OptimizerKind, shapes: &[(usize, usize)]) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam => shapes
                .iter()
                .map(|&(r, c)| (DenseMatrix::zeros(r, c), DenseMatrix::zeros(r, c)))
                .collect(),
        };
        Self { kind, moments, steps: 0 }
    }

    fn step(&mut self, params: &mut [&mut DenseMatrix], grads: &[&DenseMatrix], lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.add_scaled(g, -lr);
                }
            }
            OptimizerKind::Adam => {
                self.steps += 1;
                let bc1 = 1.0 - Self::ADAM_BETA1.powi(self.steps as i32);
                let bc2 = 1.0 - Self::ADAM_BETA2.powi(self.steps as i32);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = &mut self.moments[k];
                    for i in 0..g.data().len() {
                        let grad = g.data()[i];
                        let mi = Self::ADAM_BETA1 * m.data()[i]
                            + (1.0 - Self::ADAM_BETA1) * grad;
                        let vi = Self::ADAM_BETA2 * v.data()[i]
                            + (1.0 - Self::ADAM_BETA2) * grad * grad;
                        m.data_mut()[i] = mi;
                        v.data_mut()[i] = vi;
                        let update = (mi / bc1) / ((vi / bc2).sqrt() + Self::ADAM_EPS);
                        let cur = p.data()[i];
                        p.data_mut()[i] = cur - lr * update;
                    }
                }
            }
        }
    }
}

/// Everything one epoch needs besides the parameters.
struct EpochContext<'a> {
    config: &'a TrainConfig,
    encoder_config: &'a EncoderConfig,
    adjacency: &'a NormalizedAdjacency,
    candidates: &'a [(usize, usize)],
    triplets: &'a [Triplet],
    n_users: usize,
    n_items: usize,
    epoch: usize,
    lr: f64,
}

/// Builds one epoch's computation graph and differentiates it. Returns the
/// parameter gradients (in bind order) and the log record.
fn run_epoch(
    params: &ModelParams,
    ctx: &EpochContext<'_>,
) -> Result<(Vec<DenseMatrix>, EpochRecord), TrainStepError> {
    let config = ctx.config;
    let with_augmentor = config.uses_views();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, with_augmentor);
    let adj_values = tape.constant(DenseMatrix::new(
        ctx.adjacency.values().len(),
        1,
        ctx.adjacency.values().to_vec(),
    )?);
    let clean = encode(
        &mut tape,
        ctx.adjacency.pattern(),
        adj_values,
        bound.h0,
        &bound.encoder,
        ctx.encoder_config,
    )?;

    let views = if with_augmentor {
        let mlp = bound.mlp.as_ref().expect("augmentor bound when views are used");
        let mut views = Vec::with_capacity(2);
        for v in 0..2u64 {
            let scored = edge_probability(
                &mut tape,
                clean.output,
                ctx.candidates,
                ctx.n_users,
                mlp,
                &params.augmentor,
                rng::substream_seed(config.seed, "view/mask", 2 * ctx.epoch as u64 + v),
            )?;
            let view = sample_view(
                &mut tape,
                scored.probabilities,
                ctx.candidates,
                ctx.n_users,
                ctx.n_items,
                &params.augmentor,
                rng::substream_seed(config.seed, "view/noise", 2 * ctx.epoch as u64 + v),
            )?;
            let encoded = encode(
                &mut tape,
                &view.pattern,
                view.values,
                scored.disturbed,
                &bound.encoder,
                ctx.encoder_config,
            )?;
            views.push(encoded);
        }
        Some(views)
    } else {
        None
    };

    let l_bpr = bpr(&mut tape, clean.output, ctx.triplets, ctx.n_users)?;

    let l_gib = match &views {
        Some(v) if config.beta1 > 0.0 => Some(gib_objective(
            &mut tape,
            clean.output,
            v[0].output,
            v[1].output,
            ctx.triplets,
            ctx.n_users,
            &config.gib,
        )?),
        _ => None,
    };

    let l_cl = match &views {
        Some(v) if config.beta2 > 0.0 => {
            let (user_anchors, item_anchors, user_neg, item_neg) = match config.negatives {
                NegativeScope::InBatch => {
                    let users = sorted_unique(ctx.triplets.iter().map(|t| t.user).collect());
                    let items = sorted_unique(
                        ctx.triplets
                            .iter()
                            .flat_map(|t| [ctx.n_users + t.pos, ctx.n_users + t.neg])
                            .collect(),
                    );
                    (users, items, NegativeMode::Anchors, NegativeMode::Anchors)
                }
                NegativeScope::Full => (
                    (0..ctx.n_users).collect(),
                    (ctx.n_users..ctx.n_users + ctx.n_items).collect(),
                    NegativeMode::Range { start: 0, end: ctx.n_users },
                    NegativeMode::Range {
                        start: ctx.n_users,
                        end: ctx.n_users + ctx.n_items,
                    },
                ),
            };
            let user_side = infonce(
                &mut tape,
                v[0].output,
                v[1].output,
                &user_anchors,
                user_neg,
                config.temperature,
            )?;
            let item_side = infonce(
                &mut tape,
                v[0].output,
                v[1].output,
                &item_anchors,
                item_neg,
                config.temperature,
            )?;
            Some(tape.add(user_side, item_side)?)
        }
        _ => None,
    };

    let reg = frobenius(&mut tape, &bound.all)?;
    let zero = tape.constant_scalar(0.0);
    let gib_node = l_gib.unwrap_or(zero);
    let cl_node = l_cl.unwrap_or(zero);
    let total = joint_loss(
        &mut tape,
        l_bpr,
        gib_node,
        cl_node,
        reg,
        config.beta1,
        config.beta2,
        config.beta3,
    )?;

    let record = EpochRecord {
        epoch: ctx.epoch,
        l_bpr: tape.value(l_bpr).scalar()?,
        l_kl: match l_gib {
            Some(id) => tape.value(id).scalar()?,
            None => 0.0,
        },
        l_cl: match l_cl {
            Some(id) => tape.value(id).scalar()?,
            None => 0.0,
        },
        l_total: tape.value(total).scalar()?,
        lr: ctx.lr,
    };
    let gradients = tape.backward(total)?;
    let grads = bound
        .all
        .iter()
        .map(|&id| gradients.wrt(id).expect("every bound parameter has a gradient").clone())
        .collect();
    Ok((grads, record))
}

/// Trains a model on the interaction graph. One optimizer step per epoch:
/// the whole objective, including both sampled views, is rebuilt and
/// differentiated each time. With both view-dependent weights at zero the
/// augmentor is skipped entirely and only the ranking loss and regularizer
/// drive the updates.
pub fn train(graph: &InteractionGraph, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if graph.n_interactions() == 0 {
        return Err(TrainError::Data("training graph has no interactions".into()));
    }
    let mut params = ModelParams::init(graph, config)?;
    let adjacency = normalize_adjacency(graph);
    let with_augmentor = config.uses_views();
    let candidates = if with_augmentor {
        candidate_edges(graph, config.candidate_policy())
            .map_err(|e| TrainError::Config(e.to_string()))?
    } else {
        Vec::new()
    };

    let shapes: Vec<(usize, usize)> =
        params.matrices_mut(with_augmentor).iter().map(|m| m.shape()).collect();
    let mut optimizer = Optimizer::new(config.optimizer, &shapes);
    let encoder_config = config.encoder_config();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.learning_rate * config.lr_decay.powi(epoch as i32);
        let triplets = sample_triplets(
            graph,
            config.batch_size,
            rng::substream_seed(config.seed, "triplets", epoch as u64),
        )?;
        let ctx = EpochContext {
            config,
            encoder_config: &encoder_config,
            adjacency: &adjacency,
            candidates: &candidates,
            triplets: &triplets,
            n_users: graph.n_users(),
            n_items: graph.n_items(),
            epoch,
            lr,
        };
        let (grads, record) = run_epoch(&params, &ctx).map_err(TrainError::at_epoch(epoch))?;

        let mut matrices = params.matrices_mut(with_augmentor);
        let grad_refs: Vec<&DenseMatrix> = grads.iter().collect();
        optimizer.step(&mut matrices, &grad_refs, lr);
        if matrices.iter().any(|m| !m.is_finite()) {
            return Err(TrainError::Epoch {
                epoch,
                detail: "parameters became non-finite after the update".into(),
            });
        }
        log.push(record);
    }

    Ok(TrainOutcome { params, log })
}
