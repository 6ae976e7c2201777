//! Finite-difference gradient checking shared by the gradient suite and the
//! acceptance run.
//!
//! Every check rebuilds the computation from scratch for each perturbed
//! input, so the analytic backward pass is compared against numbers produced
//! by nothing but the forward code.

use ibrec::{DenseMatrix, NodeId, Tape};

/// Central-difference step size.
const STEP: f64 = 1e-5;

/// Verifies the analytic gradient of a scalar tape program element by
/// element against central finite differences. `build` receives a fresh tape
/// with `inputs` bound as parameters (in order) and returns the loss node.
/// An input the loss never touches must show zero numeric sensitivity.
pub fn check_gradients<F>(label: &str, inputs: &[DenseMatrix], build: F)
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let evaluate = |values: &[DenseMatrix]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|m| tape.parameter(m.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).scalar().expect("loss must be a scalar")
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|m| tape.parameter(m.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).expect("backward pass");

    for (pi, matrix) in inputs.iter().enumerate() {
        let analytic = grads.wrt(ids[pi]);
        for idx in 0..matrix.data().len() {
            let mut plus = inputs.to_vec();
            plus[pi].data_mut()[idx] += STEP;
            let mut minus = inputs.to_vec();
            minus[pi].data_mut()[idx] -= STEP;
            let numeric = (evaluate(&plus) - evaluate(&minus)) / (2.0 * STEP);
            let got = analytic.map_or(0.0, |g| g.data()[idx]);
            let tolerance = 1e-6_f64.max(1e-4 * numeric.abs().max(got.abs()));
            assert!(
                (got - numeric).abs() <= tolerance,
                "{label}: input {pi} element {idx}: analytic {got}, numeric {numeric}"
            );
        }
    }
}

pub mod suite {
    //! The gradient cases themselves, callable both as separate tests and as
    //! one timed batch.

    use std::sync::Arc;

    use ibrec::augmentor::{
        candidate_edges, edge_probability, sample_view, AugmentorParams, CandidatePolicy,
        MlpNodes,
    };
    use ibrec::encoder::{encode, EncoderConfig, Readout};
    use ibrec::gib::{gib_objective, kl_term, likelihood_term, pool_posterior, GibConfig};
    use ibrec::graph::{normalize_adjacency, InteractionGraph};
    use ibrec::losses::{bpr, frobenius, infonce, joint_loss, ranking_likelihood, NegativeMode, Triplet};
    use ibrec::rng;
    use ibrec::tensor::SparseMatrix;
    use ibrec::{DenseMatrix, Tape};

    use super::check_gradients;

    fn input(rows: usize, cols: usize, lo: f64, hi: f64, salt: u64) -> DenseMatrix {
        let mut r = rng::stream(41, "fd-input", salt);
        DenseMatrix::uniform(&mut r, rows, cols, lo, hi)
    }

    /// Inputs kept away from zero so the leaky-relu kink stays clear of the
    /// difference step.
    fn signed_input(rows: usize, cols: usize, salt: u64) -> DenseMatrix {
        let raw = input(rows, cols, -1.0, 1.0, salt);
        DenseMatrix::from_fn(rows, cols, |r, c| {
            let v = raw.get(r, c);
            v.signum() * (v.abs() + 0.05)
        })
    }

    fn toy_graph() -> InteractionGraph {
        InteractionGraph::from_edges(
            4,
            3,
            &[(0, 0), (0, 2), (1, 1), (2, 0), (2, 1), (3, 2), (3, 0)],
        )
        .unwrap()
    }

    fn toy_triplets() -> Vec<Triplet> {
        vec![
            Triplet { user: 0, pos: 0, neg: 1 },
            Triplet { user: 1, pos: 1, neg: 2 },
            Triplet { user: 3, pos: 2, neg: 1 },
            Triplet { user: 0, pos: 2, neg: 1 },
            Triplet { user: 0, pos: 0, neg: 1 },
        ]
    }

    /// Elementwise, structural, and reduction operations.
    pub fn ops() {
        let a = input(3, 4, -1.0, 1.0, 1);
        let b = input(4, 2, -1.0, 1.0, 2);
        check_gradients("matmul", &[a.clone(), b], |t, ids| {
            let m = t.matmul(ids[0], ids[1]).unwrap();
            let w = t.constant(input(3, 2, -1.0, 1.0, 3));
            let p = t.mul(m, w).unwrap();
            t.sum_all(p).unwrap()
        });

        let sparse = SparseMatrix::from_triplets(
            4,
            4,
            &[(0, 1, 0.5), (1, 0, -0.7), (1, 3, 0.9), (2, 2, 1.1), (3, 1, -0.4)],
        )
        .unwrap();
        let pattern = Arc::clone(sparse.pattern());
        let nnz = pattern.nnz();
        let values = DenseMatrix::new(nnz, 1, sparse.values().to_vec()).unwrap();
        let dense = input(4, 3, -1.0, 1.0, 4);
        check_gradients("spmm", &[values, dense], |t, ids| {
            let m = t.spmm(Arc::clone(&pattern), ids[0], ids[1]).unwrap();
            let w = t.constant(input(4, 3, -1.0, 1.0, 5));
            let p = t.mul(m, w).unwrap();
            t.sum_all(p).unwrap()
        });

        let x = input(3, 3, -1.0, 1.0, 6);
        let y = input(3, 3, -1.0, 1.0, 7);
        check_gradients("add-sub-mul-scale", &[x, y], |t, ids| {
            let s = t.add(ids[0], ids[1]).unwrap();
            let d = t.sub(s, ids[1]).unwrap();
            let m = t.mul(d, ids[0]).unwrap();
            let k = t.scale(m, 1.7).unwrap();
            t.sum_all(k).unwrap()
        });

        let left = input(3, 2, -1.0, 1.0, 8);
        let right = input(3, 2, -1.0, 1.0, 9);
        check_gradients("concat-cols", &[left.clone(), right.clone()], |t, ids| {
            let c = t.concat_cols(&[ids[0], ids[1]]).unwrap();
            let w = t.constant(input(3, 4, -1.0, 1.0, 10));
            let p = t.mul(c, w).unwrap();
            t.sum_all(p).unwrap()
        });
        check_gradients("concat-rows", &[left, right], |t, ids| {
            let c = t.concat_rows(&[ids[0], ids[1]]).unwrap();
            let w = t.constant(input(6, 2, -1.0, 1.0, 11));
            let p = t.mul(c, w).unwrap();
            t.sum_all(p).unwrap()
        });

        let z = signed_input(3, 4, 12);
        check_gradients("sigmoid", &[z.clone()], |t, ids| {
            let s = t.sigmoid(ids[0]).unwrap();
            t.sum_all(s).unwrap()
        });
        check_gradients("leaky-relu", &[z.clone()], |t, ids| {
            let s = t.leaky_relu(ids[0], 0.5).unwrap();
            t.sum_all(s).unwrap()
        });
        check_gradients("exp", &[z.clone()], |t, ids| {
            let s = t.exp(ids[0]).unwrap();
            t.sum_all(s).unwrap()
        });
        check_gradients("softplus", &[z.clone()], |t, ids| {
            let s = t.softplus(ids[0]).unwrap();
            t.sum_all(s).unwrap()
        });
        let positive = input(3, 4, 0.2, 1.2, 13);
        check_gradients("log", &[positive], |t, ids| {
            let s = t.log(ids[0]).unwrap();
            t.sum_all(s).unwrap()
        });
        // Clamp rails sit outside both input ranges so the finite
        // differences never straddle a kink.
        let interior = input(3, 4, -0.4, 0.4, 17);
        let saturated = input(3, 4, 0.6, 0.9, 18);
        check_gradients("clamp-interior", &[interior], |t, ids| {
            let c = t.clamp(ids[0], -0.5, 0.5).unwrap();
            t.sum_all(c).unwrap()
        });
        check_gradients("clamp-saturated", &[saturated], |t, ids| {
            let c = t.clamp(ids[0], -0.5, 0.5).unwrap();
            t.sum_all(c).unwrap()
        });

        check_gradients("logsumexp-rows", &[z.clone()], |t, ids| {
            let l = t.logsumexp_rows(ids[0]).unwrap();
            t.sum_all(l).unwrap()
        });
        check_gradients("mean-all", &[z.clone()], |t, ids| t.mean_all(ids[0]).unwrap());
        check_gradients("sum-rows", &[z.clone()], |t, ids| {
            let s = t.sum_rows(ids[0]).unwrap();
            let w = t.constant(input(3, 1, -1.0, 1.0, 14));
            let p = t.mul(s, w).unwrap();
            t.sum_all(p).unwrap()
        });

        let table = input(4, 3, -1.0, 1.0, 15);
        check_gradients("gather-rows", &[table], |t, ids| {
            let g = t.gather_rows(ids[0], &[0, 2, 1, 2, 2]).unwrap();
            let w = t.constant(input(5, 3, -1.0, 1.0, 16));
            let p = t.mul(g, w).unwrap();
            t.sum_all(p).unwrap()
        });

        let wide = input(3, 5, -1.0, 1.0, 17);
        check_gradients("slice-cols", &[wide], |t, ids| {
            let s = t.slice_cols(ids[0], 1, 3).unwrap();
            let w = t.constant(input(3, 3, -1.0, 1.0, 18));
            let p = t.mul(s, w).unwrap();
            t.sum_all(p).unwrap()
        });

        let tall = input(4, 2, -1.0, 1.0, 19);
        check_gradients("transpose", &[tall], |t, ids| {
            let s = t.transpose(ids[0]).unwrap();
            let w = t.constant(input(2, 4, -1.0, 1.0, 20));
            let p = t.mul(s, w).unwrap();
            t.sum_all(p).unwrap()
        });

        let rows = input(4, 3, 0.3, 1.3, 21);
        check_gradients("l2-normalize-rows", &[rows], |t, ids| {
            let n = t.l2_normalize_rows(ids[0]).unwrap();
            let w = t.constant(input(4, 3, -1.0, 1.0, 22));
            let p = t.mul(n, w).unwrap();
            t.sum_all(p).unwrap()
        });
    }

    /// Ranking and contrastive losses.
    pub fn losses() {
        let embeddings = input(7, 4, -1.0, 1.0, 30);
        let triplets = toy_triplets();
        check_gradients("bpr", &[embeddings.clone()], |t, ids| {
            bpr(t, ids[0], &triplets, 4).unwrap()
        });
        check_gradients("ranking-likelihood", &[embeddings.clone()], |t, ids| {
            ranking_likelihood(t, ids[0], &triplets, 4).unwrap()
        });

        let first = input(6, 4, -1.0, 1.0, 31);
        let second = input(6, 4, -1.0, 1.0, 32);
        check_gradients("infonce-in-batch", &[first.clone(), second.clone()], |t, ids| {
            infonce(t, ids[0], ids[1], &[0, 2, 3], NegativeMode::Anchors, 0.9).unwrap()
        });
        check_gradients("infonce-full-range", &[first, second], |t, ids| {
            infonce(t, ids[0], ids[1], &[0, 2, 3], NegativeMode::Range { start: 0, end: 6 }, 0.5)
                .unwrap()
        });

        let w1 = input(3, 2, -1.0, 1.0, 33);
        let w2 = input(2, 2, -1.0, 1.0, 34);
        check_gradients("frobenius", &[w1, w2], |t, ids| frobenius(t, ids).unwrap());
    }

    /// Bottleneck posterior, KL, and likelihood terms.
    pub fn bottleneck() {
        let clean = input(8, 4, -1.0, 1.0, 40);
        let view1 = input(8, 4, -1.0, 1.0, 41);
        let view2 = input(8, 4, -1.0, 1.0, 42);
        let triplets = vec![
            Triplet { user: 0, pos: 0, neg: 2 },
            Triplet { user: 2, pos: 1, neg: 0 },
            Triplet { user: 4, pos: 2, neg: 1 },
        ];

        check_gradients("kl-term", &[clean.clone(), view1.clone(), view2.clone()], |t, ids| {
            let posterior = pool_posterior(t, ids[0], ids[1], ids[2], 5).unwrap();
            kl_term(t, &posterior).unwrap()
        });
        check_gradients("likelihood-term", &[view1.clone(), view2.clone()], |t, ids| {
            likelihood_term(t, ids[0], ids[1], &triplets, 5, true).unwrap()
        });
        let config = GibConfig { beta: 0.7, ..GibConfig::default() };
        check_gradients("bottleneck-objective", &[clean, view1, view2], |t, ids| {
            gib_objective(t, ids[0], ids[1], ids[2], &triplets, 5, &config).unwrap()
        });
    }

    /// The whole training objective: clean encoding, two sampled views
    /// through the augmentor, ranking, bottleneck, contrastive, and
    /// regularization terms combined.
    pub fn augmented_objective() {
        let graph = toy_graph();
        let adjacency = normalize_adjacency(&graph);
        let candidates = candidate_edges(&graph, CandidatePolicy::Observed).unwrap();
        let triplets = toy_triplets();
        let mut aug_rng = rng::stream(41, "fd-aug", 0);
        let aug = AugmentorParams::init(4, 0.8, 0.5, 0.2, &mut aug_rng).unwrap();
        let enc_cfg = EncoderConfig {
            hops: vec![0, 1],
            layers: 2,
            slope: 0.5,
            readout: Readout::MeanOfLayers,
        };
        let gib_cfg = GibConfig { beta: 0.7, ..GibConfig::default() };

        // h0, four encoder blocks (two layers, two hops), then the MLP.
        let inputs = vec![
            input(7, 4, -0.5, 0.5, 50),
            input(4, 2, -0.5, 0.5, 51),
            input(4, 2, -0.5, 0.5, 52),
            input(4, 2, -0.5, 0.5, 53),
            input(4, 2, -0.5, 0.5, 54),
            input(8, 4, -0.5, 0.5, 55),
            input(4, 1, -0.5, 0.5, 56),
        ];

        let build = |t: &mut Tape, ids: &[ibrec::NodeId]| {
            let weights = vec![vec![ids[1], ids[2]], vec![ids[3], ids[4]]];
            let mlp = MlpNodes { w1: ids[5], w2: ids[6] };
            let adj_values = t
                .constant(DenseMatrix::new(adjacency.values().len(), 1, adjacency.values().to_vec()).unwrap());
            let clean =
                encode(t, adjacency.pattern(), adj_values, ids[0], &weights, &enc_cfg).unwrap();

            let mut views = Vec::new();
            for v in 0..2u64 {
                let scored =
                    edge_probability(t, clean.output, &candidates, 4, &mlp, &aug, 100 + v)
                        .unwrap();
                let view =
                    sample_view(t, scored.probabilities, &candidates, 4, 3, &aug, 200 + v)
                        .unwrap();
                // A soft weight touching the threshold would make the kept
                // set jump under perturbation and invalidate the check.
                let soft = t.value(view.soft);
                for k in 0..soft.rows() {
                    assert!(
                        (soft.get(k, 0) - aug.threshold).abs() > 1e-3,
                        "soft weight {k} sits on the keep threshold"
                    );
                }
                let enc =
                    encode(t, &view.pattern, view.values, scored.disturbed, &weights, &enc_cfg)
                        .unwrap();
                views.push(enc.output);
            }

            let l_bpr = bpr(t, clean.output, &triplets, 4).unwrap();
            let l_gib =
                gib_objective(t, clean.output, views[0], views[1], &triplets, 4, &gib_cfg)
                    .unwrap();
            let cl_users =
                infonce(t, views[0], views[1], &[0, 1, 2, 3], NegativeMode::Anchors, 0.9)
                    .unwrap();
            let cl_items =
                infonce(t, views[0], views[1], &[4, 5, 6], NegativeMode::Anchors, 0.9).unwrap();
            let l_cl = t.add(cl_users, cl_items).unwrap();
            let reg = frobenius(t, ids).unwrap();
            joint_loss(t, l_bpr, l_gib, l_cl, reg, 0.3, 0.5, 0.01).unwrap()
        };

        check_gradients("augmented-objective", &inputs, build);
    }
}
