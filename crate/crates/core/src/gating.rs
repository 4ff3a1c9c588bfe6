//! Attribute combination: fixed weights or an input-dependent gating network
//! whose softmax output lies on the probability simplex.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::model::UrmModel;
use crate::numeric::{Activation, AdamConfig, AdamState, DenseNet};
use crate::scalar::{dot, log_sigmoid, sigmoid, softmax, Scalar};
use crate::world::PreferencePair;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSource {
    Fixed,
    Gated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CombinationWeights<T> {
    pub weights: Vec<T>,
    pub source: WeightSource,
}

impl<T: Scalar> CombinationWeights<T> {
    pub fn new(weights: Vec<T>, source: WeightSource) -> Self {
        Self { weights, source }
    }

    pub fn fixed(weights: Vec<T>) -> Self {
        Self::new(weights, WeightSource::Fixed)
    }
}

/// Weighted sum of attribute scores.
pub fn combine<T: Scalar>(scores: &[T], weights: &CombinationWeights<T>) -> Result<T> {
    if scores.len() != weights.weights.len() {
        return config_err(format!(
            "{} attribute scores but {} combination weights",
            scores.len(),
            weights.weights.len()
        ));
    }
    Ok(dot(scores, &weights.weights))
}

/// Two SELU hidden layers followed by a linear map to one logit per attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingNet<T> {
    net: DenseNet<T>,
}

impl<T: Scalar> GatingNet<T> {
    pub fn shapes(input_dim: usize, num_attributes: usize, hidden: usize) -> Vec<crate::numeric::LayerShape> {
        DenseNet::<T>::mlp_shapes(
            input_dim,
            &[hidden, hidden],
            num_attributes,
            Activation::Selu,
            Activation::Identity,
        )
    }

    pub fn init<R: rand::Rng + ?Sized>(
        input_dim: usize,
        num_attributes: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::from_net(DenseNet::init(Self::shapes(input_dim, num_attributes, hidden), rng)?)
    }

    pub fn zeros(input_dim: usize, num_attributes: usize, hidden: usize) -> Result<Self> {
        Self::from_net(DenseNet::zeros(Self::shapes(input_dim, num_attributes, hidden))?)
    }

    pub fn from_net(net: DenseNet<T>) -> Result<Self> {
        if net.layers().last().map(|l| l.activation) != Some(Activation::Identity) {
            return config_err("gating logits must come from an identity output layer");
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &DenseNet<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet<T> {
        &mut self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn num_attributes(&self) -> usize {
        self.net.output_dim()
    }
}

pub fn gating_forward<T: Scalar>(gating: &GatingNet<T>, hidden: &[T]) -> Result<CombinationWeights<T>> {
    if hidden.len() != gating.input_dim() {
        return config_err(format!(
            "hidden state has {} features, gating network expects {}",
            hidden.len(),
            gating.input_dim()
        ));
    }
    let logits = gating.net.forward(hidden)?;
    Ok(CombinationWeights::new(softmax(&logits), WeightSource::Gated))
}

/// Hidden state and frozen attribute scores for one response.
#[derive(Clone, Debug)]
pub struct FrozenView<T> {
    pub hidden: Vec<T>,
    pub scores: Vec<T>,
}

impl<T: Scalar> FrozenView<T> {
    pub fn of(model: &UrmModel<T>, features: &[T]) -> Result<Self> {
        let hidden = model.hidden(features)?;
        let scores = model.scores_from_hidden(&hidden)?;
        Ok(Self { hidden, scores })
    }
}

fn gated_reward<T: Scalar>(gating: &GatingNet<T>, view: &FrozenView<T>) -> Result<T> {
    combine(&view.scores, &gating_forward(gating, &view.hidden)?)
}

/// Adds `scale * d reward / d params` for one response into `grads`.
fn accumulate_reward_grad<T: Scalar>(
    gating: &GatingNet<T>,
    view: &FrozenView<T>,
    scale: T,
    grads: &mut [T],
) -> Result<()> {
    let trace = gating.net.forward_traced(&view.hidden)?;
    let w = softmax(trace.output());
    let g: Vec<T> = view.scores.iter().map(|&s| scale * s).collect();
    let wg = dot(&w, &g);
    let grad_logits: Vec<T> = w.iter().zip(&g).map(|(&wi, &gi)| wi * (gi - wg)).collect();
    gating.net.backward(&trace, &grad_logits, grads);
    Ok(())
}

/// Bradley-Terry loss `-log sigmoid(r_chosen - r_rejected)` and its gradient
/// with respect to the gating parameters.
pub fn ranking_loss<T: Scalar>(
    gating: &GatingNet<T>,
    chosen: &FrozenView<T>,
    rejected: &FrozenView<T>,
) -> Result<(T, Vec<T>)> {
    let margin = gated_reward(gating, chosen)? - gated_reward(gating, rejected)?;
    let loss = -log_sigmoid(margin);
    let d_margin = -sigmoid(-margin);
    let mut grads = vec![T::zero(); gating.net.num_params()];
    accumulate_reward_grad(gating, chosen, d_margin, &mut grads)?;
    accumulate_reward_grad(gating, rejected, -d_margin, &mut grads)?;
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatingConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for GatingConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 30,
            batch_size: 64,
            adam: AdamConfig {
                weight_decay: 1e-3,
                ..AdamConfig::default()
            },
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct GatingTraining<T> {
    pub gating: GatingNet<T>,
    pub history: Vec<GatingEpoch>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

fn view_accuracy<T: Scalar>(gating: &GatingNet<T>, views: &[(FrozenView<T>, FrozenView<T>)]) -> Result<f64> {
    let mut correct = 0usize;
    for (c, r) in views {
        if gated_reward(gating, c)? > gated_reward(gating, r)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / views.len() as f64)
}

/// Trains a gating network on top of a frozen model.
///
/// The model is only read; the returned network is the epoch with the
/// highest validation pairwise accuracy (epoch 0 is the initialization).
pub fn train_gating<T: Scalar>(
    model: &UrmModel<T>,
    pairs: &[PreferencePair<T>],
    config: &GatingConfig,
) -> Result<GatingTraining<T>> {
    if pairs.is_empty() {
        return input_err("gating training needs at least one preference pair");
    }
    if config.batch_size == 0 || config.hidden == 0 {
        return config_err("gating batch size and width must be positive");
    }
    if !(config.validation_fraction > 0.0 && config.validation_fraction < 1.0) {
        return config_err("validation fraction must lie in (0, 1)");
    }
    config.adam.validate()?;

    let views: Vec<(FrozenView<T>, FrozenView<T>)> = pairs
        .iter()
        .map(|p| Ok((FrozenView::of(model, &p.chosen.features)?, FrozenView::of(model, &p.rejected.features)?)))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (views.len() as f64 * config.validation_fraction).round() as usize;
    let (val_idx, train_idx) = if n_val == 0 || n_val >= views.len() {
        (order.clone(), order)
    } else {
        let (v, t) = order.split_at(n_val);
        (v.to_vec(), t.to_vec())
    };
    let val: Vec<_> = val_idx.iter().map(|&i| views[i].clone()).collect();

    let mut gating = GatingNet::init(
        model.hidden_dim(),
        model.schema().num_attributes(),
        config.hidden,
        &mut rng,
    )?;
    let mut adam = AdamState::new(gating.net.num_params(), config.adam);
    let mut best = gating.clone();
    let mut best_acc = view_accuracy(&gating, &val)?;
    let mut best_epoch = 0;
    let mut history = vec![GatingEpoch {
        epoch: 0,
        train_loss: f64::NAN,
        val_accuracy: best_acc,
    }];

    let mut train_order = train_idx;
    for epoch in 1..=config.epochs {
        train_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_order.chunks(config.batch_size) {
            let mut grads = vec![T::zero(); gating.net.num_params()];
            for &i in batch {
                let (loss, g) = ranking_loss(&gating, &views[i].0, &views[i].1)?;
                epoch_loss += loss.as_f64();
                for (acc, gi) in grads.iter_mut().zip(g) {
                    *acc = *acc + gi;
                }
            }
            let scale = T::from_count(batch.len());
            for g in &mut grads {
                *g = *g / scale;
            }
            adam.step(gating.net.params_mut(), &grads)?;
        }
        let acc = view_accuracy(&gating, &val)?;
        history.push(GatingEpoch {
            epoch,
            train_loss: epoch_loss / train_order.len() as f64,
            val_accuracy: acc,
        });
        if acc > best_acc {
            best_acc = acc;
            best = gating.clone();
            best_epoch = epoch;
        }
    }
    Ok(GatingTraining {
        gating: best,
        history,
        best_epoch,
        best_val_accuracy: best_acc,
    })
}
