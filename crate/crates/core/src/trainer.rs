//! Training loops, pairwise evaluation, and weight-space merging.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result, UrmError};
use crate::head::{
    expected_regression_loss, mle_loss, mse_loss, regression_loss, AttributeDistribution, LogStdClamp,
};
use crate::model::{Combination, LossKind, ModelMetadata, RewardScorer, Schema, UrmModel};
use crate::numeric::{Activation, AdamConfig, AdamState, DenseNet, Trace};
use crate::scalar::Scalar;
use crate::world::{PreferencePair, Record};

/// Offsets the initialization stream so it never coincides with the data stream.
const INIT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub validation_fraction: f64,
    /// Controls the train/validation split, shuffling, and reparameterization draws.
    pub seed: u64,
    /// Controls parameter initialization; defaults to `seed`.
    pub init_seed: Option<u64>,
    pub clamp: LogStdClamp,
    /// Hidden widths of the head (tanh).
    pub head_hidden: Vec<usize>,
    /// Hidden widths of an optional trunk; empty means no trunk.
    pub trunk_hidden: Vec<usize>,
    /// Fixed combination weights; uniform when absent.
    pub weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Mle,
            epochs: 20,
            batch_size: 64,
            adam: AdamConfig {
                weight_decay: 1e-3,
                ..AdamConfig::default()
            },
            validation_fraction: 0.1,
            seed: 0,
            init_seed: None,
            clamp: LogStdClamp::default(),
            head_hidden: vec![64],
            trunk_hidden: Vec::new(),
            weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config_err("batch size must be at least 1");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return config_err("validation fraction must lie in (0, 1)");
        }
        if self.head_hidden.contains(&0) || self.trunk_hidden.contains(&0) {
            return config_err("hidden widths must be positive");
        }
        self.clamp.validate()?;
        self.adam.validate()
    }
}

/// One row of the training history CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean predicted log-std on the validation split (probabilistic heads).
    pub mean_log_std: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: u64,
}

fn csv_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9e}")).unwrap_or_default()
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,mean_log_std,val_accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                csv_field(Some(e.train_loss)),
                csv_field(Some(e.val_loss)),
                csv_field(e.mean_log_std),
                csv_field(e.val_accuracy)
            ));
        }
        out
    }
}

/// Freshly initialized model for `schema` under `config`.
pub fn init_model<T: Scalar>(schema: &Schema, config: &TrainConfig) -> Result<UrmModel<T>> {
    config.validate()?;
    let init_seed = config.init_seed.unwrap_or(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed ^ INIT_STREAM);
    let n = schema.num_attributes();
    let (trunk, hidden_dim) = if config.trunk_hidden.is_empty() {
        (None, schema.input_dim)
    } else {
        let (&last, rest) = config.trunk_hidden.split_last().expect("nonempty");
        let shapes = DenseNet::<T>::mlp_shapes(schema.input_dim, rest, last, Activation::Tanh, Activation::Tanh);
        (Some(DenseNet::init(shapes, &mut rng)?), last)
    };
    let head_kind = config.loss.head_kind();
    let head_shapes = DenseNet::<T>::mlp_shapes(
        hidden_dim,
        &config.head_hidden,
        head_kind.output_dim(n),
        Activation::Tanh,
        Activation::Identity,
    );
    let head = DenseNet::init(head_shapes, &mut rng)?;
    let weights = match &config.weights {
        Some(w) => w.iter().map(|&x| T::lit(x)).collect(),
        None => vec![T::one() / T::from_count(n); n],
    };
    let mut model = UrmModel::new(
        schema.clone(),
        trunk,
        head,
        head_kind,
        config.clamp,
        Combination::Fixed(weights),
    )?;
    model.metadata = ModelMetadata {
        seed: Some(config.seed),
        init_seed: Some(init_seed),
        loss: Some(config.loss),
        ..ModelMetadata::default()
    };
    Ok(model)
}

fn labels_of<'a, T: Scalar>(r: &'a Record<T>, n: usize) -> Result<&'a [T]> {
    match &r.labels {
        Some(l) if l.len() == n => Ok(l),
        Some(l) => config_err(format!(
            "record {} has {} labels, schema has {n} attributes",
            r.id,
            l.len()
        )),
        None => input_err(format!("record {} has no attribute labels", r.id)),
    }
}

struct Pass<T> {
    trunk: Option<Trace<T>>,
    head: Trace<T>,
}

fn forward_pass<T: Scalar>(model: &UrmModel<T>, x: &[T]) -> Result<Pass<T>> {
    let trunk = match &model.trunk {
        Some(t) => Some(t.forward_traced(x)?),
        None => None,
    };
    let hidden = trunk.as_ref().map_or(x, |t| t.output());
    let head = model.head.forward_traced(hidden)?;
    Ok(Pass { trunk, head })
}

/// Loss of one example and its gradient with respect to the raw head output.
fn example_loss<T: Scalar>(
    model: &UrmModel<T>,
    loss: LossKind,
    raw: &[T],
    labels: &[T],
    alpha: Option<&[T]>,
) -> Result<(T, Vec<T>)> {
    let n = labels.len();
    match loss {
        LossKind::Deterministic => {
            let lg = mse_loss(raw, labels)?;
            Ok((lg.loss, lg.grad_mu))
        }
        LossKind::Mle | LossKind::Regression => {
            let dist = AttributeDistribution::from_head_output(raw, &model.clamp)?;
            let lg = match (loss, alpha) {
                (LossKind::Regression, Some(a)) => regression_loss(&dist, labels, a)?,
                _ => mle_loss(&dist, labels)?,
            };
            let mut grad = lg.flat();
            for i in 0..n {
                if !model.clamp.passes(raw[n + i]) {
                    grad[n + i] = T::zero();
                }
            }
            Ok((lg.loss, grad))
        }
    }
}

/// Loss and full backbone gradient for one record; exposed for gradient checks.
pub fn record_loss_and_grad<T: Scalar>(
    model: &UrmModel<T>,
    loss: LossKind,
    record: &Record<T>,
    alpha: Option<&[T]>,
) -> Result<(T, Vec<T>)> {
    let n = model.schema.num_attributes();
    let labels = labels_of(record, n)?;
    let pass = forward_pass(model, &record.features)?;
    let (value, grad_out) = example_loss(model, loss, pass.head.output(), labels, alpha)?;
    let trunk_len = model.trunk.as_ref().map_or(0, |t| t.num_params());
    let mut grads = vec![T::zero(); trunk_len + model.head.num_params()];
    let (trunk_grads, head_grads) = grads.split_at_mut(trunk_len);
    let grad_hidden = model.head.backward(&pass.head, &grad_out, head_grads);
    if let (Some(t), Some(trace)) = (&model.trunk, &pass.trunk) {
        t.backward(trace, &grad_hidden, trunk_grads);
    }
    Ok((value, grads))
}

/// Deterministic validation loss: the regression loss is replaced by its
/// closed-form expectation over the reparameterization noise.
fn validation_loss<T: Scalar>(model: &UrmModel<T>, loss: LossKind, record: &Record<T>) -> Result<(f64, Option<f64>)> {
    let n = model.schema.num_attributes();
    let labels = labels_of(record, n)?;
    let hidden = model.hidden(&record.features)?;
    match loss {
        LossKind::Deterministic => {
            let scores = model.scores_from_hidden(&hidden)?;
            Ok((mse_loss(&scores, labels)?.loss.as_f64(), None))
        }
        LossKind::Mle | LossKind::Regression => {
            let dist = model
                .distribution_from_hidden(&hidden)?
                .expect("probabilistic head");
            let mean_log_std =
                dist.log_std().iter().map(|s| s.as_f64()).sum::<f64>() / n as f64;
            let value = if loss == LossKind::Mle {
                mle_loss(&dist, labels)?.loss
            } else {
                expected_regression_loss(&dist, labels)?
            };
            Ok((value.as_f64(), Some(mean_log_std)))
        }
    }
}

/// Trains one model on labelled records.
pub fn train_urm<T: Scalar>(
    records: &[Record<T>],
    schema: &Schema,
    config: &TrainConfig,
) -> Result<(UrmModel<T>, TrainHistory)> {
    train_urm_with_validation(records, None, schema, config)
}

/// Like [`train_urm`], additionally reporting pairwise accuracy on
/// `val_pairs` after every epoch.
///
/// The returned parameters are those of the epoch with the lowest
/// validation loss (epoch 0 being the initialization).
pub fn train_urm_with_validation<T: Scalar>(
    records: &[Record<T>],
    val_pairs: Option<&[PreferencePair<T>]>,
    schema: &Schema,
    config: &TrainConfig,
) -> Result<(UrmModel<T>, TrainHistory)> {
    config.validate()?;
    if records.is_empty() {
        return input_err("training needs at least one record");
    }
    let n = schema.num_attributes();
    for r in records {
        labels_of(r, n)?;
        if r.features.len() != schema.input_dim {
            return config_err(format!(
                "record {} has {} features, schema expects {}",
                r.id,
                r.features.len(),
                schema.input_dim
            ));
        }
    }
    if let Some(w) = &config.weights {
        if w.len() != n {
            return config_err(format!("{} fixed weights for {n} attributes", w.len()));
        }
    }

    let mut model = init_model::<T>(schema, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((records.len() as f64) * config.validation_fraction).round() as usize;
    let (val_idx, mut train_idx) = if n_val == 0 || n_val >= records.len() {
        (order.clone(), order)
    } else {
        let (v, t) = order.split_at(n_val);
        (v.to_vec(), t.to_vec())
    };

    let evaluate = |m: &UrmModel<T>| -> Result<(f64, Option<f64>, Option<f64>)> {
        let mut total = 0.0;
        let mut log_std = 0.0;
        let mut has_log_std = false;
        for &i in &val_idx {
            let (l, s) = validation_loss(m, config.loss, &records[i])?;
            total += l;
            if let Some(s) = s {
                log_std += s;
                has_log_std = true;
            }
        }
        let count = val_idx.len() as f64;
        let acc = match val_pairs {
            Some(p) if !p.is_empty() => Some(eval_pairwise_accuracy(m, p)?),
            _ => None,
        };
        Ok((total / count, has_log_std.then_some(log_std / count), acc))
    };

    let mut params = model.backbone_params();
    let mut adam = AdamState::new(params.len(), config.adam);
    let (val0, log_std0, acc0) = evaluate(&model)?;
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(config.epochs + 1),
        best_epoch: 0,
        steps: 0,
    };
    history.epochs.push(EpochRecord {
        epoch: 0,
        train_loss: f64::NAN,
        val_loss: val0,
        mean_log_std: log_std0,
        val_accuracy: acc0,
    });
    let mut best_val = val0;
    let mut best_params = params.clone();
    let mut best_train = f64::NAN;
    let mut alpha = vec![T::zero(); n];

    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            let mut grads = vec![T::zero(); params.len()];
            for &i in batch {
                let a = if config.loss == LossKind::Regression {
                    for v in alpha.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = T::lit(z);
                    }
                    Some(alpha.as_slice())
                } else {
                    None
                };
                let (loss, g) = record_loss_and_grad(&model, config.loss, &records[i], a)?;
                if !loss.is_finite() {
                    return Err(UrmError::Diverged {
                        step: history.steps as usize + 1,
                        reason: format!("non-finite loss on record {}", records[i].id),
                    });
                }
                epoch_loss += loss.as_f64();
                for (acc, gi) in grads.iter_mut().zip(g) {
                    *acc = *acc + gi;
                }
            }
            let scale = T::from_count(batch.len());
            for g in &mut grads {
                *g = *g / scale;
            }
            adam.step(&mut params, &grads).map_err(|e| match e {
                UrmError::Diverged { reason, .. } => UrmError::Diverged {
                    step: history.steps as usize + 1,
                    reason,
                },
                other => other,
            })?;
            model.set_backbone_params(&params)?;
            history.steps += 1;
        }
        let train_loss = epoch_loss / train_idx.len() as f64;
        let (val, log_std, acc) = evaluate(&model)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: val,
            mean_log_std: log_std,
            val_accuracy: acc,
        });
        if val < best_val {
            best_val = val;
            best_params = params.clone();
            best_train = train_loss;
            history.best_epoch = epoch;
        }
    }

    model.set_backbone_params(&best_params)?;
    model.metadata.steps = history.steps;
    model.metadata.final_val_loss = Some(best_val);
    model.metadata.final_train_loss = (!best_train.is_nan()).then_some(best_train);
    Ok((model, history))
}

/// Fraction of pairs whose chosen response gets a strictly higher reward.
/// Exact ties count as incorrect.
pub fn eval_pairwise_accuracy<T: Scalar, S: RewardScorer<T> + ?Sized>(
    scorer: &S,
    pairs: &[PreferencePair<T>],
) -> Result<f64> {
    if pairs.is_empty() {
        return input_err("cannot evaluate accuracy on zero pairs");
    }
    let correct: Vec<bool> = pairs
        .par_iter()
        .map(|p| {
            Ok(scorer.score(&p.chosen.features)?.reward > scorer.score(&p.rejected.features)?.reward)
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / pairs.len() as f64)
}

/// Accuracy of precomputed `(chosen, rejected)` reward pairs under the same tie rule.
pub fn accuracy_from_rewards<T: Scalar>(rewards: &[(T, T)]) -> Option<f64> {
    if rewards.is_empty() {
        return None;
    }
    let correct = rewards.iter().filter(|(c, r)| c > r).count();
    Some(correct as f64 / rewards.len() as f64)
}

/// Reward minus a KL penalty against a reference policy.
pub fn kl_penalized_reward<T: Scalar>(reward: T, kl: T, eta: T) -> Result<T> {
    if kl < T::zero() {
        return input_err(format!("KL divergence must be nonnegative, got {kl}"));
    }
    if eta < T::zero() {
        return input_err(format!("KL coefficient must be nonnegative, got {eta}"));
    }
    Ok(reward - eta * kl)
}

/// `lambda * a + (1 - lambda) * b`, exact at both endpoints and when `a == b`.
fn lerp<T: Scalar>(a: &[T], b: &[T], lambda: T) -> Vec<T> {
    if lambda == T::one() {
        return a.to_vec();
    }
    if lambda == T::zero() {
        return b.to_vec();
    }
    a.iter().zip(b).map(|(&x, &y)| y + lambda * (x - y)).collect()
}

/// Parameter-wise interpolation `lambda * m1 + (1 - lambda) * m2`.
pub fn merge_models<T: Scalar>(m1: &UrmModel<T>, m2: &UrmModel<T>, lambda: T) -> Result<UrmModel<T>> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return config_err(format!("merge coefficient {lambda} outside [0, 1]"));
    }
    if !m1.same_architecture(m2) {
        return config_err("cannot merge models with different architectures or schemas");
    }
    let mut merged = m1.clone();
    merged.set_backbone_params(&lerp(&m1.backbone_params(), &m2.backbone_params(), lambda))?;
    merged.combination = match (&m1.combination, &m2.combination) {
        (Combination::Fixed(a), Combination::Fixed(b)) => Combination::Fixed(lerp(a, b, lambda)),
        (Combination::Gated(a), Combination::Gated(b)) => {
            let mut g = a.clone();
            g.net_mut()
                .set_params(&lerp(a.net().params(), b.net().params(), lambda))?;
            Combination::Gated(g)
        }
        _ => unreachable!("architectures checked above"),
    };
    let seed = |m: &UrmModel<T>| m.metadata.seed.map_or("?".to_string(), |s| s.to_string());
    merged.metadata = ModelMetadata {
        seed: None,
        init_seed: None,
        loss: m1.metadata.loss,
        steps: 0,
        final_train_loss: None,
        final_val_loss: None,
        provenance: Some(format!(
            "merge lambda={} of seeds [{}, {}]",
            lambda,
            seed(m1),
            seed(m2)
        )),
    };
    Ok(merged)
}
