//! Probabilistic value head.
//!
//! A head maps a hidden-state feature vector to one Gaussian per preference
//! attribute: the first `n` outputs are means, the last `n` are log standard
//! deviations. Covariance across attributes is diagonal.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::numeric::DenseNet;
use crate::scalar::Scalar;

pub const LOG_STD_MIN: f64 = -6.0;
pub const LOG_STD_MAX: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Outputs `2n` values: means then log standard deviations.
    Probabilistic,
    /// Outputs `n` point scores, no variance.
    Deterministic,
}

impl HeadKind {
    pub fn output_dim(self, attributes: usize) -> usize {
        match self {
            HeadKind::Probabilistic => 2 * attributes,
            HeadKind::Deterministic => attributes,
        }
    }
}

/// Bounds applied to the raw log-std outputs of a head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogStdClamp {
    pub min: f64,
    pub max: f64,
}

impl Default for LogStdClamp {
    fn default() -> Self {
        Self {
            min: LOG_STD_MIN,
            max: LOG_STD_MAX,
        }
    }
}

impl LogStdClamp {
    pub fn validate(&self) -> Result<()> {
        if !(self.min < self.max) || !self.min.is_finite() || !self.max.is_finite() {
            return config_err(format!(
                "log-std clamp [{}, {}] is not a finite nonempty interval",
                self.min, self.max
            ));
        }
        Ok(())
    }

    pub fn apply<T: Scalar>(&self, raw: T) -> T {
        raw.max(T::lit(self.min)).min(T::lit(self.max))
    }

    /// Whether gradients pass through the clamp at `raw`.
    pub fn passes<T: Scalar>(&self, raw: T) -> bool {
        raw >= T::lit(self.min) && raw <= T::lit(self.max)
    }
}

/// Independent Gaussians `N(mu[i], exp(2 * log_std[i]))`, one per attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeDistribution<T> {
    mu: Vec<T>,
    log_std: Vec<T>,
}

impl<T: Scalar> AttributeDistribution<T> {
    pub fn new(mu: Vec<T>, log_std: Vec<T>) -> Result<Self> {
        if mu.len() != log_std.len() {
            return config_err(format!(
                "{} means but {} log standard deviations",
                mu.len(),
                log_std.len()
            ));
        }
        if mu.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return input_err("attribute distribution has non-finite parameters");
        }
        Ok(Self { mu, log_std })
    }

    /// Splits a raw `2n` head output, clamping the log-std half.
    pub fn from_head_output(raw: &[T], clamp: &LogStdClamp) -> Result<Self> {
        if raw.len() % 2 != 0 || raw.is_empty() {
            return config_err(format!(
                "probabilistic head output has odd or zero length {}",
                raw.len()
            ));
        }
        let n = raw.len() / 2;
        let log_std = raw[n..].iter().map(|&s| clamp.apply(s)).collect();
        Self::new(raw[..n].to_vec(), log_std)
    }

    pub fn num_attributes(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    pub fn log_std(&self) -> &[T] {
        &self.log_std
    }

    pub fn variances(&self) -> impl Iterator<Item = T> + '_ {
        let two = T::lit(2.0);
        self.log_std.iter().map(move |&s| (two * s).exp())
    }

    fn check_len(&self, other: &[T], what: &str) -> Result<()> {
        if other.len() != self.mu.len() {
            return config_err(format!(
                "{what} has length {}, distribution has {} attributes",
                other.len(),
                self.mu.len()
            ));
        }
        Ok(())
    }
}

/// Reparameterized draw `scores = mu + alpha * exp(log_std)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardSample<T> {
    pub scores: Vec<T>,
    pub alpha_used: Vec<T>,
}

/// Loss value with its gradient with respect to the head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub loss: T,
    pub grad_mu: Vec<T>,
    /// Empty for deterministic heads.
    pub grad_log_std: Vec<T>,
}

impl<T: Scalar> LossGrad<T> {
    /// Gradient laid out like the head output (means, then log-stds).
    pub fn flat(&self) -> Vec<T> {
        self.grad_mu.iter().chain(&self.grad_log_std).copied().collect()
    }
}

pub fn head_forward<T: Scalar>(
    head: &DenseNet<T>,
    hidden: &[T],
    clamp: &LogStdClamp,
) -> Result<AttributeDistribution<T>> {
    if head.output_dim() % 2 != 0 {
        return config_err("probabilistic head must have an even output dimension");
    }
    if hidden.len() != head.input_dim() {
        return config_err(format!(
            "hidden state has {} features, head expects {}",
            hidden.len(),
            head.input_dim()
        ));
    }
    AttributeDistribution::from_head_output(&head.forward(hidden)?, clamp)
}

pub fn sample_rewards<T: Scalar>(
    dist: &AttributeDistribution<T>,
    alpha: &[T],
) -> Result<RewardSample<T>> {
    dist.check_len(alpha, "alpha")?;
    let scores = dist
        .mu
        .iter()
        .zip(&dist.log_std)
        .zip(alpha)
        .map(|((&m, &s), &a)| m + a * s.exp())
        .collect();
    Ok(RewardSample {
        scores,
        alpha_used: alpha.to_vec(),
    })
}

/// Gaussian negative log-likelihood summed over attributes.
pub fn mle_loss<T: Scalar>(dist: &AttributeDistribution<T>, labels: &[T]) -> Result<LossGrad<T>> {
    dist.check_len(labels, "labels")?;
    let half_ln_2pi = T::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
    let two = T::lit(2.0);
    let mut loss = T::zero();
    let mut grad_mu = Vec::with_capacity(labels.len());
    let mut grad_log_std = Vec::with_capacity(labels.len());
    for ((&m, &s), &r) in dist.mu.iter().zip(&dist.log_std).zip(labels) {
        let var = (two * s).exp();
        let resid = r - m;
        loss = loss + half_ln_2pi + s + resid * resid / (two * var);
        grad_mu.push(-resid / var);
        grad_log_std.push(T::one() - resid * resid / var);
    }
    Ok(LossGrad {
        loss,
        grad_mu,
        grad_log_std,
    })
}

/// Squared error of a reparameterized sample against the labels.
pub fn regression_loss<T: Scalar>(
    dist: &AttributeDistribution<T>,
    labels: &[T],
    alpha: &[T],
) -> Result<LossGrad<T>> {
    dist.check_len(labels, "labels")?;
    dist.check_len(alpha, "alpha")?;
    let two = T::lit(2.0);
    let mut loss = T::zero();
    let mut grad_mu = Vec::with_capacity(labels.len());
    let mut grad_log_std = Vec::with_capacity(labels.len());
    for (((&m, &s), &r), &a) in dist.mu.iter().zip(&dist.log_std).zip(labels).zip(alpha) {
        let std = s.exp();
        let err = m + a * std - r;
        loss = loss + err * err;
        grad_mu.push(two * err);
        grad_log_std.push(two * err * a * std);
    }
    Ok(LossGrad {
        loss,
        grad_mu,
        grad_log_std,
    })
}

/// Expected regression loss over `alpha ~ N(0, 1)`: `sum (mu - R)^2 + exp(2 sigma)`.
pub fn expected_regression_loss<T: Scalar>(
    dist: &AttributeDistribution<T>,
    labels: &[T],
) -> Result<T> {
    dist.check_len(labels, "labels")?;
    Ok(dist
        .mu
        .iter()
        .zip(labels)
        .zip(dist.variances())
        .map(|((&m, &r), v)| (m - r) * (m - r) + v)
        .sum())
}

pub fn deterministic_forward<T: Scalar>(head: &DenseNet<T>, hidden: &[T]) -> Result<Vec<T>> {
    if hidden.len() != head.input_dim() {
        return config_err(format!(
            "hidden state has {} features, head expects {}",
            hidden.len(),
            head.input_dim()
        ));
    }
    head.forward(hidden)
}

/// Plain squared error used to train deterministic heads.
pub fn mse_loss<T: Scalar>(scores: &[T], labels: &[T]) -> Result<LossGrad<T>> {
    if scores.len() != labels.len() {
        return config_err("scores and labels differ in length");
    }
    let two = T::lit(2.0);
    let loss = scores.iter().zip(labels).map(|(&s, &r)| (s - r) * (s - r)).sum();
    let grad_mu = scores.iter().zip(labels).map(|(&s, &r)| two * (s - r)).collect();
    Ok(LossGrad {
        loss,
        grad_mu,
        grad_log_std: Vec::new(),
    })
}

/// Sum of per-attribute variances.
pub fn aleatoric_uncertainty<T: Scalar>(dist: &AttributeDistribution<T>) -> T {
    dist.variances().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_check, Activation, LayerShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn dist(mu: &[f64], log_std: &[f64]) -> AttributeDistribution<f64> {
        AttributeDistribution::new(mu.to_vec(), log_std.to_vec()).unwrap()
    }

    fn bias_only_head(bias: &[f64]) -> DenseNet<f64> {
        let mut net =
            DenseNet::zeros(vec![LayerShape::new(3, bias.len(), Activation::Identity)]).unwrap();
        net.bias_mut(0).copy_from_slice(bias);
        net
    }

    #[test]
    fn zero_head_gives_unit_gaussians() {
        let head = bias_only_head(&[0.0; 4]);
        let d = head_forward(&head, &[0.4, -2.0, 7.0], &LogStdClamp::default()).unwrap();
        assert_eq!(d.mu(), &[0.0, 0.0]);
        assert_eq!(d.log_std(), &[0.0, 0.0]);
    }

    #[test]
    fn bias_passthrough() {
        let head = bias_only_head(&[1.0, 2.0, 0.0, 0.0]);
        let d = head_forward(&head, &[5.0, 5.0, 5.0], &LogStdClamp::default()).unwrap();
        assert_eq!(d.mu(), &[1.0, 2.0]);
        assert_eq!(d.log_std(), &[0.0, 0.0]);
    }

    #[test]
    fn raw_log_std_is_clamped() {
        let head = bias_only_head(&[0.0, 10.0]);
        let d = head_forward(&head, &[0.0; 3], &LogStdClamp::default()).unwrap();
        assert_eq!(d.log_std(), &[3.0]);
        let head = bias_only_head(&[0.0, -50.0]);
        let d = head_forward(&head, &[0.0; 3], &LogStdClamp::default()).unwrap();
        assert_eq!(d.log_std(), &[-6.0]);
    }

    #[test]
    fn head_dimension_mismatch() {
        let head = bias_only_head(&[0.0, 0.0]);
        assert!(head_forward(&head, &[0.0; 2], &LogStdClamp::default()).is_err());
        let odd = bias_only_head(&[0.0; 3]);
        assert!(head_forward(&odd, &[0.0; 3], &LogStdClamp::default()).is_err());
    }

    #[test]
    fn sample_rewards_examples() {
        let s = sample_rewards(&dist(&[2.0], &[3f64.ln()]), &[0.5]).unwrap();
        assert!((s.scores[0] - 3.5).abs() < 1e-12);
        let d = dist(&[0.3, -1.0], &[0.2, 0.1]);
        assert_eq!(sample_rewards(&d, &[0.0, 0.0]).unwrap().scores, d.mu());
        let s = sample_rewards(&dist(&[0.0, 1.0], &[0.0, 0.0]), &[1.0, -1.0]).unwrap();
        assert_eq!(s.scores, vec![1.0, 0.0]);
    }

    #[test]
    fn mle_loss_examples() {
        let l = mle_loss(&dist(&[0.0], &[0.0]), &[0.0]).unwrap();
        assert!((l.loss - 0.918_938_533_204_672_7).abs() < 1e-12);
        // Oracle: -ln N(2; 0, 4) = 0.5 ln(2 pi) + ln 2 + 4 / 8.
        let l = mle_loss(&dist(&[0.0], &[2f64.ln()]), &[2.0]).unwrap();
        let oracle = -(1.0 / (2.0 * (2.0 * std::f64::consts::PI).sqrt()) * (-0.5f64).exp()).ln();
        assert!((l.loss - oracle).abs() < 1e-12);
        assert!((l.loss - 2.112086).abs() < 1e-6);
        let l = mle_loss(&dist(&[1.5, -0.5], &[0.3, -1.0]), &[1.5, -0.5]).unwrap();
        assert_eq!(l.grad_mu, vec![0.0, 0.0]);
    }

    #[test]
    fn regression_loss_examples() {
        let l = regression_loss(&dist(&[1.0, 2.0], &[0.7, -2.0]), &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(l.loss, 5.0);
        let l = regression_loss(&dist(&[0.0], &[0.0]), &[0.0], &[1.0]).unwrap();
        assert_eq!(l.loss, 1.0);
    }

    #[test]
    fn log_std_gradient_is_positive_in_expectation() {
        // E[2 alpha^2 exp(2 sigma)] = 2 at sigma = 0.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = dist(&[0.0], &[0.0]);
        let draws = 100_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            let a: f64 = StandardNormal.sample(&mut rng);
            sum += regression_loss(&d, &[0.0], &[a]).unwrap().grad_log_std[0];
        }
        let mean = sum / draws as f64;
        assert!((mean - 2.0).abs() < 0.03, "{mean}");
    }

    #[test]
    fn deterministic_head_examples() {
        let head = DenseNet::<f64>::zeros(vec![LayerShape::new(2, 3, Activation::Identity)]).unwrap();
        assert_eq!(deterministic_forward(&head, &[1.0, 2.0]).unwrap(), vec![0.0; 3]);
        let mut head = DenseNet::<f64>::zeros(vec![LayerShape::new(2, 1, Activation::Identity)]).unwrap();
        head.bias_mut(0)[0] = 3.5;
        assert_eq!(deterministic_forward(&head, &[1.0, 2.0]).unwrap(), vec![3.5]);
        assert_eq!(mse_loss(&[1.0], &[3.0]).unwrap().loss, 4.0);
    }

    #[test]
    fn aleatoric_examples() {
        assert!((aleatoric_uncertainty(&dist(&[0.0, 0.0], &[0.0, 0.0])) - 2.0).abs() < 1e-15);
        assert!((aleatoric_uncertainty(&dist(&[0.0, 0.0], &[0.0, 2f64.ln()])) - 5.0).abs() < 1e-12);
        let floor = aleatoric_uncertainty(&dist(&[0.0, 0.0], &[-6.0, -6.0]));
        assert!((floor - 1.229e-5).abs() < 1e-8);
        assert_eq!(floor, 2.0 * (-12f64).exp());
    }

    #[test]
    fn expected_regression_loss_matches_monte_carlo() {
        let d = dist(&[0.4, -1.0], &[-0.3, 0.2]);
        let labels = [1.0, -0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 200_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let a: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            acc += regression_loss(&d, &labels, &a).unwrap().loss;
        }
        let closed = expected_regression_loss(&d, &labels).unwrap();
        assert!((acc / draws as f64 - closed).abs() < 0.02);
    }

    fn split(p: &[f64]) -> AttributeDistribution<f64> {
        let n = p.len() / 2;
        dist(&p[..n], &p[n..])
    }

    proptest::proptest! {
        #[test]
        fn mle_gradient_matches_finite_differences(
            p in proptest::collection::vec(-1.5f64..1.5, 6),
            labels in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let err = finite_diff_check(
                |q: &[f64]| mle_loss(&split(q), &labels).unwrap().loss,
                |q| mle_loss(&split(q), &labels).unwrap().flat(),
                &p,
                1e-5,
            ).unwrap();
            proptest::prop_assert!(err <= 1e-4, "{}", err);
        }

        #[test]
        fn regression_gradient_matches_finite_differences(
            p in proptest::collection::vec(-1.5f64..1.5, 6),
            labels in proptest::collection::vec(-3.0f64..3.0, 3),
            alpha in proptest::collection::vec(-2.5f64..2.5, 3),
        ) {
            let err = finite_diff_check(
                |q: &[f64]| regression_loss(&split(q), &labels, &alpha).unwrap().loss,
                |q| regression_loss(&split(q), &labels, &alpha).unwrap().flat(),
                &p,
                1e-5,
            ).unwrap();
            proptest::prop_assert!(err <= 1e-4, "{}", err);
        }

        #[test]
        fn mle_is_minimized_at_the_label(
            labels in proptest::collection::vec(-3.0f64..3.0, 3),
            log_std in proptest::collection::vec(-2.0f64..2.0, 3),
            delta in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            proptest::prop_assume!(delta.iter().any(|d| d.abs() > 1e-6));
            let at = mle_loss(&dist(&labels, &log_std), &labels).unwrap().loss;
            let moved: Vec<f64> = labels.iter().zip(&delta).map(|(l, d)| l + d).collect();
            let off = mle_loss(&dist(&moved, &log_std), &labels).unwrap().loss;
            proptest::prop_assert!(off > at);
        }

        #[test]
        fn sample_round_trips_alpha(
            mu in proptest::collection::vec(-5.0f64..5.0, 4),
            log_std in proptest::collection::vec(-6.0f64..3.0, 4),
            alpha in proptest::collection::vec(-4.0f64..4.0, 4),
        ) {
            let d = dist(&mu, &log_std);
            let s = sample_rewards(&d, &alpha).unwrap();
            for i in 0..4 {
                let back = (s.scores[i] - mu[i]) / log_std[i].exp();
                proptest::prop_assert!((back - s.alpha_used[i]).abs() <= 1e-9 * (1.0 + mu[i].abs() / log_std[i].exp()));
            }
        }

        #[test]
        fn aleatoric_ignores_mu_and_grows_with_log_std(
            mu in proptest::collection::vec(-5.0f64..5.0, 3),
            log_std in proptest::collection::vec(-6.0f64..2.5, 3),
            k in 0usize..3,
            bump in 0.01f64..0.5,
        ) {
            let base = aleatoric_uncertainty(&dist(&mu, &log_std));
            proptest::prop_assert_eq!(base, aleatoric_uncertainty(&dist(&[0.0; 3], &log_std)));
            let mut raised = log_std.clone();
            raised[k] += bump;
            proptest::prop_assert!(aleatoric_uncertainty(&dist(&mu, &raised)) > base);
        }
    }
}
