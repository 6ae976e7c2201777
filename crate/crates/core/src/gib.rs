//! Information-bottleneck regularization of the augmented views.
//!
//! The two view embeddings and the clean embedding are pooled into a
//! Gaussian posterior per user: the first half of the pooled dimensions is
//! the mean, the second half (through softplus) the standard deviation. The
//! bottleneck objective is the posterior's KL divergence from a standard
//! normal prior plus a ranking likelihood on the view embeddings, trading
//! compression of the views against how predictive they remain.

use crate::losses::{ranking_likelihood, Triplet};
use crate::tensor::{DenseMatrix, NodeId, Tape, TensorError};

/// Additive floor keeping the posterior scale strictly positive.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum GibError {
    #[error("bottleneck configuration: {0}")]
    Config(String),

    #[error("bottleneck contract: {0}")]
    Contract(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Prior the posterior is pulled towards. Only the standard normal is
/// supported; the field exists so configurations state it explicitly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Prior {
    #[default]
    StandardNormal,
}

/// How the clean and view embeddings are combined before the split into
/// mean and scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    /// Element-wise mean of the clean embedding and both views.
    #[default]
    MeanOverViews,
}

/// Settings of the bottleneck term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GibConfig {
    /// Weight of the KL term inside the bottleneck objective.
    pub beta: f64,
    pub prior: Prior,
    pub pooling: Pooling,
    /// Average the ranking likelihood over both views instead of using the
    /// first view alone.
    pub both_views: bool,
}

impl Default for GibConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            prior: Prior::StandardNormal,
            pooling: Pooling::MeanOverViews,
            both_views: true,
        }
    }
}

impl GibConfig {
    pub fn validate(&self) -> Result<(), GibError> {
        if !(self.beta >= 0.0) {
            return Err(GibError::Config(format!(
                "KL weight must be non-negative, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Diagonal Gaussian posterior over user codes; both nodes are
/// `n_users x d/2`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianPosterior {
    pub mean: NodeId,
    pub scale: NodeId,
}

/// Pools the clean embedding with both views (element-wise mean), restricts
/// to the user rows, and splits the width into a mean half and a
/// softplus-mapped scale half.
pub fn pool_posterior(
    tape: &mut Tape,
    clean: NodeId,
    view1: NodeId,
    view2: NodeId,
    n_users: usize,
) -> Result<GaussianPosterior, GibError> {
    let shape = tape.value(clean).shape();
    for &node in &[view1, view2] {
        if tape.value(node).shape() != shape {
            return Err(GibError::Contract(format!(
                "view embedding is {:?} but the clean embedding is {:?}",
                tape.value(node).shape(),
                shape
            )));
        }
    }
    let (rows, d) = shape;
    if n_users == 0 || n_users > rows {
        return Err(GibError::Contract(format!(
            "{n_users} user rows do not fit in a {rows}-row embedding"
        )));
    }
    if d % 2 != 0 {
        return Err(GibError::Config(format!(
            "posterior split needs an even embedding width, got {d}"
        )));
    }

    let s1 = tape.add(clean, view1)?;
    let s2 = tape.add(s1, view2)?;
    let pooled = tape.scale(s2, 1.0 / 3.0)?;
    let users: Vec<usize> = (0..n_users).collect();
    let user_rows = tape.gather_rows(pooled, &users)?;
    let mean = tape.slice_cols(user_rows, 0, d / 2)?;
    let pre_scale = tape.slice_cols(user_rows, d / 2, d / 2)?;
    let sp = tape.softplus(pre_scale)?;
    let floor = tape.constant(DenseMatrix::filled(n_users, d / 2, SCALE_FLOOR));
    let scale = tape.add(sp, floor)?;
    Ok(GaussianPosterior { mean, scale })
}

/// KL divergence of the diagonal Gaussian posterior from the standard
/// normal, averaged over users:
/// `mean_u 0.5 * sum_j (mu^2 + eta^2 - 1 - 2 ln eta)`.
pub fn kl_term(tape: &mut Tape, posterior: &GaussianPosterior) -> Result<NodeId, GibError> {
    let scale_values = tape.value(posterior.scale);
    if scale_values.data().iter().any(|&s| !(s > 0.0)) {
        return Err(GibError::Contract("posterior scale must be strictly positive".into()));
    }
    let (rows, cols) = scale_values.shape();
    if tape.value(posterior.mean).shape() != (rows, cols) {
        return Err(GibError::Contract("posterior mean and scale shapes differ".into()));
    }

    let mu2 = tape.mul(posterior.mean, posterior.mean)?;
    let eta2 = tape.mul(posterior.scale, posterior.scale)?;
    let log_eta = tape.log(posterior.scale)?;
    let two_log = tape.scale(log_eta, 2.0)?;
    let ones = tape.constant(DenseMatrix::filled(rows, cols, 1.0));
    let a = tape.add(mu2, eta2)?;
    let b = tape.sub(a, ones)?;
    let inner = tape.sub(b, two_log)?;
    let per_user = tape.sum_rows(inner)?;
    let mean = tape.mean_all(per_user)?;
    Ok(tape.scale(mean, 0.5)?)
}

/// Ranking likelihood of the views: the mean per-triplet ranking loss on the
/// first view, or the average of both views when configured.
pub fn likelihood_term(
    tape: &mut Tape,
    view1: NodeId,
    view2: NodeId,
    triplets: &[Triplet],
    n_users: usize,
    both_views: bool,
) -> Result<NodeId, GibError> {
    let l1 = ranking_likelihood(tape, view1, triplets, n_users)?;
    if !both_views {
        return Ok(l1);
    }
    let l2 = ranking_likelihood(tape, view2, triplets, n_users)?;
    let s = tape.add(l1, l2)?;
    Ok(tape.scale(s, 0.5)?)
}

/// The full bottleneck objective `likelihood + beta * kl`.
pub fn gib_objective(
    tape: &mut Tape,
    clean: NodeId,
    view1: NodeId,
    view2: NodeId,
    triplets: &[Triplet],
    n_users: usize,
    config: &GibConfig,
) -> Result<NodeId, GibError> {
    config.validate()?;
    let posterior = pool_posterior(tape, clean, view1, view2, n_users)?;
    let kl = kl_term(tape, &posterior)?;
    let lik = likelihood_term(tape, view1, view2, triplets, n_users, config.both_views)?;
    let weighted = tape.scale(kl, config.beta)?;
    Ok(tape.add(lik, weighted)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::stable_softplus;

    fn random_node(tape: &mut Tape, n: usize, d: usize, seed: u64) -> NodeId {
        let mut r = rng::stream(seed, "gib-test", 0);
        tape.parameter(DenseMatrix::uniform(&mut r, n, d, -1.0, 1.0))
    }

    #[test]
    fn pooling_averages_and_splits() {
        let mut tape = Tape::new();
        let a = tape.constant(DenseMatrix::filled(3, 4, 0.3));
        let b = tape.constant(DenseMatrix::filled(3, 4, 0.6));
        let c = tape.constant(DenseMatrix::filled(3, 4, 0.9));
        let post = pool_posterior(&mut tape, a, b, c, 2).unwrap();
        let mean = tape.value(post.mean);
        let scale = tape.value(post.scale);
        assert_eq!(mean.shape(), (2, 2));
        assert_eq!(scale.shape(), (2, 2));
        assert!((mean.get(0, 0) - 0.6).abs() < 1e-12);
        let want = stable_softplus(0.6) + SCALE_FLOOR;
        assert!((scale.get(1, 1) - want).abs() < 1e-12);
    }

    #[test]
    fn zero_preactivation_scale_is_ln_two_plus_floor() {
        let mut tape = Tape::new();
        let z = tape.constant(DenseMatrix::zeros(2, 4));
        let post = pool_posterior(&mut tape, z, z, z, 2).unwrap();
        let want = 2f64.ln() + SCALE_FLOOR;
        assert!((tape.value(post.scale).get(0, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn odd_width_is_a_configuration_error() {
        let mut tape = Tape::new();
        let z = tape.constant(DenseMatrix::zeros(2, 3));
        let err = pool_posterior(&mut tape, z, z, z, 2).unwrap_err();
        assert!(matches!(err, GibError::Config(_)));
    }

    #[test]
    fn kl_is_zero_exactly_at_the_prior() {
        let mut tape = Tape::new();
        let mean = tape.constant(DenseMatrix::zeros(3, 2));
        let scale = tape.constant(DenseMatrix::filled(3, 2, 1.0));
        let kl = kl_term(&mut tape, &GaussianPosterior { mean, scale }).unwrap();
        assert!(tape.value(kl).scalar().unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_matches_closed_form_anchor() {
        // One user, one dimension, mu = 2, eta = 0.5:
        // 0.5 * (4 + 0.25 - 1 - 2 ln 0.5).
        let mut tape = Tape::new();
        let mean = tape.constant(DenseMatrix::filled(1, 1, 2.0));
        let scale = tape.constant(DenseMatrix::filled(1, 1, 0.5));
        let kl = kl_term(&mut tape, &GaussianPosterior { mean, scale }).unwrap();
        let want = 0.5 * (4.0 + 0.25 - 1.0 - 2.0 * 0.5f64.ln());
        assert!((tape.value(kl).scalar().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn kl_averages_over_users_and_sums_over_dimensions() {
        let mut tape = Tape::new();
        let mean = tape.constant(DenseMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 3.0]).unwrap());
        let scale = tape.constant(DenseMatrix::new(2, 2, vec![1.0, 2.0, 0.5, 1.0]).unwrap());
        let kl = kl_term(&mut tape, &GaussianPosterior { mean, scale }).unwrap();
        let per = |mu: f64, eta: f64| mu * mu + eta * eta - 1.0 - 2.0 * eta.ln();
        let want = 0.5 * ((per(1.0, 1.0) + per(0.0, 2.0)) + (per(0.0, 0.5) + per(3.0, 1.0))) / 2.0;
        assert!((tape.value(kl).scalar().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_non_positive_scales() {
        let mut tape = Tape::new();
        let mean = tape.constant(DenseMatrix::zeros(1, 2));
        let scale = tape.constant(DenseMatrix::new(1, 2, vec![0.5, 0.0]).unwrap());
        let err = kl_term(&mut tape, &GaussianPosterior { mean, scale }).unwrap_err();
        assert!(matches!(err, GibError::Contract(_)));
    }

    #[test]
    fn likelihood_averages_both_views_when_asked() {
        let mut tape = Tape::new();
        let v1 = random_node(&mut tape, 7, 4, 1);
        let v2 = random_node(&mut tape, 7, 4, 2);
        let triplets: Vec<Triplet> =
            (0..5).map(|k| Triplet { user: k % 3, pos: k % 4, neg: (k + 1) % 4 }).collect();
        let single = likelihood_term(&mut tape, v1, v2, &triplets, 3, false).unwrap();
        let l1 = tape.value(single).scalar().unwrap();
        let other = likelihood_term(&mut tape, v2, v1, &triplets, 3, false).unwrap();
        let l2 = tape.value(other).scalar().unwrap();
        let both = likelihood_term(&mut tape, v1, v2, &triplets, 3, true).unwrap();
        assert!((tape.value(both).scalar().unwrap() - 0.5 * (l1 + l2)).abs() < 1e-12);
    }

    #[test]
    fn objective_combines_likelihood_and_weighted_kl() {
        let mut tape = Tape::new();
        let clean = random_node(&mut tape, 6, 4, 3);
        let v1 = random_node(&mut tape, 6, 4, 4);
        let v2 = random_node(&mut tape, 6, 4, 5);
        let triplets = [Triplet { user: 0, pos: 0, neg: 1 }, Triplet { user: 1, pos: 2, neg: 0 }];
        let config = GibConfig { beta: 0.7, ..GibConfig::default() };
        let total = gib_objective(&mut tape, clean, v1, v2, &triplets, 3, &config).unwrap();

        let post = pool_posterior(&mut tape, clean, v1, v2, 3).unwrap();
        let kl = kl_term(&mut tape, &post).unwrap();
        let lik = likelihood_term(&mut tape, v1, v2, &triplets, 3, true).unwrap();
        let want = tape.value(lik).scalar().unwrap() + 0.7 * tape.value(kl).scalar().unwrap();
        assert!((tape.value(total).scalar().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn gradients_reach_all_three_embeddings() {
        let mut tape = Tape::new();
        let clean = random_node(&mut tape, 6, 4, 6);
        let v1 = random_node(&mut tape, 6, 4, 7);
        let v2 = random_node(&mut tape, 6, 4, 8);
        let triplets = [Triplet { user: 0, pos: 1, neg: 2 }];
        let total =
            gib_objective(&mut tape, clean, v1, v2, &triplets, 3, &GibConfig::default()).unwrap();
        let grads = tape.backward(total).unwrap();
        for node in [clean, v1, v2] {
            assert!(grads.wrt(node).unwrap().data().iter().any(|&g| g != 0.0));
        }
    }
}
