//! Ensembles of independently trained reward models and their epistemic
//! uncertainty estimates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};
use crate::head::{aleatoric_uncertainty, AttributeDistribution, HeadKind};
use crate::model::{diagonal_cov_norm, RewardScorer, Schema, Score, UncertaintyKind, UrmModel};
use crate::scalar::Scalar;
use crate::trainer::{train_urm, TrainConfig, TrainHistory};
use crate::world::Record;

#[derive(Clone, Debug)]
pub struct Urme<T> {
    members: Vec<UrmModel<T>>,
    seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport<T> {
    pub aleatoric_per_member: Vec<T>,
    pub rewards_per_member: Vec<T>,
    pub u1: T,
    pub u2: T,
}

fn check_distinct(seeds: &[u64]) -> Result<()> {
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return config_err(format!("ensemble seeds must be distinct, got {seeds:?}"));
    }
    Ok(())
}

/// Hex SHA-256 of the schema's canonical JSON, used to tie member files together.
pub fn schema_hash(schema: &Schema) -> String {
    let json = serde_json::to_vec(schema).expect("schema serializes");
    hex::encode(Sha256::digest(&json))
}

impl<T: Scalar> Urme<T> {
    pub fn new(members: Vec<UrmModel<T>>, seeds: Vec<u64>) -> Result<Self> {
        if members.len() < 2 {
            return config_err("an ensemble needs at least two members");
        }
        if members.len() != seeds.len() {
            return config_err("one seed per ensemble member is required");
        }
        check_distinct(&seeds)?;
        let schema = members[0].schema();
        for m in &members {
            if m.schema() != schema {
                return config_err("ensemble members disagree on the schema");
            }
            if m.head_kind() != HeadKind::Probabilistic {
                return config_err("ensemble members need probabilistic heads");
            }
        }
        Ok(Self { members, seeds })
    }

    pub fn members(&self) -> &[UrmModel<T>] {
        &self.members
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn schema(&self) -> &Schema {
        self.members[0].schema()
    }
}

/// Largest reward difference between any two members.
pub fn u1_reward_gap<T: Scalar>(rewards: &[T]) -> Result<T> {
    if rewards.len() < 2 {
        return config_err("reward gap needs at least two member rewards");
    }
    let (lo, hi) = rewards
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    Ok(hi - lo)
}

/// Largest Frobenius norm among the members' diagonal covariances.
pub fn u2_max_cov_norm<T: Scalar>(dists: &[AttributeDistribution<T>]) -> Result<T> {
    let Some(first) = dists.first() else {
        return config_err("covariance norm needs at least one distribution");
    };
    if dists.iter().any(|d| d.num_attributes() != first.num_attributes()) {
        return config_err("member distributions disagree on attribute count");
    }
    Ok(dists
        .iter()
        .map(diagonal_cov_norm)
        .fold(T::zero(), |m, v| m.max(v)))
}

/// Mean member reward plus the full uncertainty report.
pub fn ensemble_evaluate<T: Scalar>(
    ensemble: &Urme<T>,
    features: &[T],
) -> Result<(T, UncertaintyReport<T>)> {
    let mut rewards = Vec::with_capacity(ensemble.len());
    let mut aleatoric = Vec::with_capacity(ensemble.len());
    let mut dists = Vec::with_capacity(ensemble.len());
    for m in &ensemble.members {
        let out = m.evaluate(features)?;
        let dist = out.distribution.expect("probabilistic members");
        rewards.push(out.reward);
        aleatoric.push(aleatoric_uncertainty(&dist));
        dists.push(dist);
    }
    let mean = running_mean(&rewards);
    let report = UncertaintyReport {
        u1: u1_reward_gap(&rewards)?,
        u2: u2_max_cov_norm(&dists)?,
        aleatoric_per_member: aleatoric,
        rewards_per_member: rewards,
    };
    Ok((mean, report))
}

/// Incremental mean; exact when all values are equal.
fn running_mean<T: Scalar>(values: &[T]) -> T {
    values
        .iter()
        .enumerate()
        .fold(T::zero(), |m, (i, &v)| m + (v - m) / T::from_count(i + 1))
}

impl<T: Scalar> RewardScorer<T> for Urme<T> {
    fn score(&self, features: &[T]) -> Result<Score<T>> {
        let (reward, report) = ensemble_evaluate(self, features)?;
        Ok(Score {
            reward,
            aleatoric: Some(running_mean(&report.aleatoric_per_member)),
            u1: Some(report.u1),
            u2: Some(report.u2),
        })
    }

    fn default_uncertainty(&self) -> UncertaintyKind {
        UncertaintyKind::U1
    }

    fn input_dim(&self) -> usize {
        self.schema().input_dim
    }
}

/// Trains one member per seed. Each member's seed drives its initialization,
/// data split, shuffling, and noise; members share nothing else.
pub fn build_ensemble<T: Scalar>(
    records: &[Record<T>],
    schema: &Schema,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<(Urme<T>, Vec<TrainHistory>)> {
    if seeds.len() < 2 {
        return config_err("an ensemble needs at least two seeds");
    }
    check_distinct(seeds)?;
    if config.loss.head_kind() != HeadKind::Probabilistic {
        return config_err("ensemble members need a probabilistic loss (mle or regression)");
    }
    let trained: Vec<(UrmModel<T>, TrainHistory)> = seeds
        .par_iter()
        .map(|&seed| {
            let member_config = TrainConfig {
                seed,
                init_seed: None,
                ..config.clone()
            };
            train_urm(records, schema, &member_config)
        })
        .collect::<Result<_>>()?;
    let (members, histories): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    Ok((Urme::new(members, seeds.to_vec())?, histories))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::combine;
    use crate::head::LogStdClamp;
    use crate::model::Combination;
    use crate::numeric::{Activation, DenseNet, LayerShape};

    fn dist(log_std: &[f64]) -> AttributeDistribution<f64> {
        AttributeDistribution::new(vec![0.0; log_std.len()], log_std.to_vec()).unwrap()
    }

    fn bias_model(mu: f64) -> UrmModel<f64> {
        let mut head = DenseNet::zeros(vec![LayerShape::new(2, 2, Activation::Identity)]).unwrap();
        head.bias_mut(0)[0] = mu;
        UrmModel::new(
            Schema::generic(2, 1).unwrap(),
            None,
            head,
            HeadKind::Probabilistic,
            LogStdClamp::default(),
            Combination::Fixed(vec![1.0]),
        )
        .unwrap()
    }

    #[test]
    fn reward_gap_examples() {
        assert!((u1_reward_gap(&[1.0f64, 1.5, 0.8]).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(u1_reward_gap(&[2.5, 2.5, 2.5]).unwrap(), 0.0);
        assert_eq!(u1_reward_gap(&[-1.0, 1.0]).unwrap(), 2.0);
        assert!(u1_reward_gap(&[1.0]).is_err());
    }

    #[test]
    fn covariance_norm_examples() {
        assert!((u2_max_cov_norm(&[dist(&[0.0, 0.0])]).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let two = u2_max_cov_norm(&[dist(&[0.0, 0.0]), dist(&[2f64.ln(), 0.0])]).unwrap();
        assert!((two - 17f64.sqrt()).abs() < 1e-12);
        assert!((two - 4.123106).abs() < 1e-6);
        let floor = u2_max_cov_norm(&[dist(&[-6.0; 3]), dist(&[-6.0; 3])]).unwrap();
        assert!((floor - 3f64.sqrt() * (-12f64).exp()).abs() < 1e-18);
        assert!(u2_max_cov_norm::<f64>(&[]).is_err());
    }

    #[test]
    fn evaluate_mean_and_gap() {
        let e = Urme::new(vec![bias_model(1.0), bias_model(3.0)], vec![1, 2]).unwrap();
        let (r, rep) = ensemble_evaluate(&e, &[0.0, 0.0]).unwrap();
        assert_eq!(r, 2.0);
        assert_eq!(rep.u1, 2.0);
        assert_eq!(rep.rewards_per_member, vec![1.0, 3.0]);
        assert_eq!(rep.aleatoric_per_member, vec![1.0, 1.0]);
        assert!(ensemble_evaluate(&e, &[0.0]).is_err());
    }

    #[test]
    fn identical_members_have_no_disagreement() {
        let m = bias_model(0.7);
        let e = Urme::new(vec![m.clone(), m.clone(), m.clone()], vec![1, 2, 3]).unwrap();
        let (r, rep) = ensemble_evaluate(&e, &[0.3, 0.1]).unwrap();
        assert_eq!(rep.u1, 0.0);
        let single = combine(
            &m.evaluate(&[0.3, 0.1]).unwrap().scores,
            &crate::gating::CombinationWeights::fixed(vec![1.0]),
        )
        .unwrap();
        assert_eq!(r, single);
    }

    #[test]
    fn duplicate_seeds_are_rejected() {
        assert!(Urme::new(vec![bias_model(0.0), bias_model(1.0)], vec![7, 7]).is_err());
        let schema = Schema::generic(2, 1).unwrap();
        assert!(build_ensemble::<f64>(&[], &schema, &TrainConfig::default(), &[7, 7]).is_err());
        assert!(Urme::new(vec![bias_model(0.0)], vec![1]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn gap_is_translation_invariant_and_scales(
            r in proptest::collection::vec(-10.0f64..10.0, 2..6),
            c in -50.0f64..50.0,
            s in 0.01f64..20.0,
        ) {
            let base = u1_reward_gap(&r).unwrap();
            let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
            let scaled: Vec<f64> = r.iter().map(|x| x * s).collect();
            proptest::prop_assert!((u1_reward_gap(&shifted).unwrap() - base).abs() <= 1e-9);
            proptest::prop_assert!((u1_reward_gap(&scaled).unwrap() - s * base).abs() <= 1e-9 * (1.0 + s * base));
            let all_equal = r.iter().all(|&x| x == r[0]);
            proptest::prop_assert_eq!(base == 0.0, all_equal);
        }

        #[test]
        fn cov_norm_is_monotone(
            a in proptest::collection::vec(-6.0f64..3.0, 3),
            b in proptest::collection::vec(-6.0f64..3.0, 3),
            k in 0usize..3,
            bump in 0.0f64..1.0,
        ) {
            let base = u2_max_cov_norm(&[dist(&a), dist(&b)]).unwrap();
            proptest::prop_assert!(base >= (-12.0f64).exp());
            let mut raised = b.clone();
            raised[k] += bump;
            proptest::prop_assert!(u2_max_cov_norm(&[dist(&a), dist(&raised)]).unwrap() >= base);
        }
    }
}
