//! The trainable reward model: optional trunk, value head, and attribute
//! combination.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::gating::{combine, gating_forward, CombinationWeights, GatingNet, WeightSource};
use crate::head::{
    aleatoric_uncertainty, deterministic_forward, head_forward, AttributeDistribution, HeadKind,
    LogStdClamp,
};
use crate::numeric::DenseNet;
use crate::scalar::Scalar;

/// Input dimension and attribute names shared by a model and its data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub input_dim: usize,
    pub attributes: Vec<String>,
}

impl Schema {
    pub fn new(input_dim: usize, attributes: Vec<String>) -> Result<Self> {
        if input_dim == 0 || attributes.is_empty() {
            return config_err("schema needs a positive input dimension and at least one attribute");
        }
        Ok(Self {
            input_dim,
            attributes,
        })
    }

    /// Schema with placeholder names `attr0`, `attr1`, ...
    pub fn generic(input_dim: usize, num_attributes: usize) -> Result<Self> {
        Self::new(
            input_dim,
            (0..num_attributes).map(|i| format!("attr{i}")).collect(),
        )
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mle,
    Regression,
    Deterministic,
}

impl LossKind {
    pub fn head_kind(self) -> HeadKind {
        match self {
            LossKind::Deterministic => HeadKind::Deterministic,
            LossKind::Mle | LossKind::Regression => HeadKind::Probabilistic,
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mle" => Ok(LossKind::Mle),
            "regression" | "reg" => Ok(LossKind::Regression),
            "deterministic" | "det" => Ok(LossKind::Deterministic),
            other => Err(format!("unknown loss kind `{other}`")),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Combination<T> {
    Fixed(Vec<T>),
    Gated(GatingNet<T>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: Option<u64>,
    pub init_seed: Option<u64>,
    pub loss: Option<LossKind>,
    pub steps: u64,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub provenance: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyKind {
    /// Sum of attribute variances (averaged over members for an ensemble).
    Aleatoric,
    /// Largest pairwise reward gap between ensemble members.
    U1,
    /// Largest Frobenius norm among member covariances.
    U2,
}

impl UncertaintyKind {
    pub const ALL: [UncertaintyKind; 3] = [
        UncertaintyKind::Aleatoric,
        UncertaintyKind::U1,
        UncertaintyKind::U2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UncertaintyKind::Aleatoric => "aleatoric",
            UncertaintyKind::U1 => "u1",
            UncertaintyKind::U2 => "u2",
        }
    }
}

impl std::str::FromStr for UncertaintyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "aleatoric" => Ok(UncertaintyKind::Aleatoric),
            "u1" => Ok(UncertaintyKind::U1),
            "u2" => Ok(UncertaintyKind::U2),
            other => Err(format!("unknown uncertainty kind `{other}`")),
        }
    }
}

/// Scalar reward plus whichever uncertainty estimates the scorer supports.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score<T> {
    pub reward: T,
    pub aleatoric: Option<T>,
    pub u1: Option<T>,
    pub u2: Option<T>,
}

impl<T: Scalar> Score<T> {
    pub fn uncertainty(&self, kind: UncertaintyKind) -> Result<T> {
        let value = match kind {
            UncertaintyKind::Aleatoric => self.aleatoric,
            UncertaintyKind::U1 => self.u1,
            UncertaintyKind::U2 => self.u2,
        };
        value.ok_or_else(|| {
            crate::error::UrmError::Config(format!(
                "this scorer does not provide {} uncertainty",
                kind.name()
            ))
        })
    }
}

/// Anything that turns a feature vector into a reward: a single model, an
/// ensemble, or a ground-truth oracle.
pub trait RewardScorer<T: Scalar>: Sync {
    fn score(&self, features: &[T]) -> Result<Score<T>>;

    /// The uncertainty used when a caller does not pick one.
    fn default_uncertainty(&self) -> UncertaintyKind;

    fn input_dim(&self) -> usize;
}

/// Everything one forward pass of a [`UrmModel`] produces.
#[derive(Clone, Debug)]
pub struct ModelOutput<T> {
    pub scores: Vec<T>,
    pub distribution: Option<AttributeDistribution<T>>,
    pub weights: CombinationWeights<T>,
    pub reward: T,
}

#[derive(Clone, Debug)]
pub struct UrmModel<T> {
    pub(crate) schema: Schema,
    pub(crate) trunk: Option<DenseNet<T>>,
    pub(crate) head: DenseNet<T>,
    pub(crate) head_kind: HeadKind,
    pub(crate) clamp: LogStdClamp,
    pub(crate) combination: Combination<T>,
    pub metadata: ModelMetadata,
}

impl<T: Scalar> UrmModel<T> {
    pub fn new(
        schema: Schema,
        trunk: Option<DenseNet<T>>,
        head: DenseNet<T>,
        head_kind: HeadKind,
        clamp: LogStdClamp,
        combination: Combination<T>,
    ) -> Result<Self> {
        clamp.validate()?;
        let n = schema.num_attributes();
        let hidden_dim = match &trunk {
            Some(t) => {
                if t.input_dim() != schema.input_dim {
                    return config_err(format!(
                        "trunk expects {} inputs, schema has {}",
                        t.input_dim(),
                        schema.input_dim
                    ));
                }
                t.output_dim()
            }
            None => schema.input_dim,
        };
        if head.input_dim() != hidden_dim {
            return config_err(format!(
                "head expects {} inputs but the hidden state has {}",
                head.input_dim(),
                hidden_dim
            ));
        }
        if head.output_dim() != head_kind.output_dim(n) {
            return config_err(format!(
                "{:?} head for {n} attributes needs {} outputs, has {}",
                head_kind,
                head_kind.output_dim(n),
                head.output_dim()
            ));
        }
        match &combination {
            Combination::Fixed(w) if w.len() != n => {
                return config_err(format!("{} fixed weights for {n} attributes", w.len()))
            }
            Combination::Gated(g) if g.input_dim() != hidden_dim || g.num_attributes() != n => {
                return config_err("gating network does not match the model dimensions")
            }
            _ => {}
        }
        Ok(Self {
            schema,
            trunk,
            head,
            head_kind,
            clamp,
            combination,
            metadata: ModelMetadata::default(),
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn trunk(&self) -> Option<&DenseNet<T>> {
        self.trunk.as_ref()
    }

    pub fn head(&self) -> &DenseNet<T> {
        &self.head
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head_kind
    }

    pub fn clamp(&self) -> &LogStdClamp {
        &self.clamp
    }

    pub fn combination(&self) -> &Combination<T> {
        &self.combination
    }

    pub fn hidden_dim(&self) -> usize {
        self.head.input_dim()
    }

    /// Swaps the combination rule, keeping trunk and head untouched.
    pub fn with_combination(mut self, combination: Combination<T>) -> Result<Self> {
        let n = self.schema.num_attributes();
        match &combination {
            Combination::Fixed(w) if w.len() != n => {
                return config_err(format!("{} fixed weights for {n} attributes", w.len()))
            }
            Combination::Gated(g) if g.input_dim() != self.hidden_dim() || g.num_attributes() != n => {
                return config_err("gating network does not match the model dimensions")
            }
            _ => {}
        }
        self.combination = combination;
        Ok(self)
    }

    /// Trunk output for `features`, or the features themselves without a trunk.
    pub fn hidden(&self, features: &[T]) -> Result<Vec<T>> {
        if features.len() != self.schema.input_dim {
            return config_err(format!(
                "record has {} features, model expects {}",
                features.len(),
                self.schema.input_dim
            ));
        }
        match &self.trunk {
            Some(t) => t.forward(features),
            None => Ok(features.to_vec()),
        }
    }

    /// Per-attribute Gaussians from a hidden state (probabilistic heads only).
    pub fn distribution_from_hidden(&self, hidden: &[T]) -> Result<Option<AttributeDistribution<T>>> {
        match self.head_kind {
            HeadKind::Probabilistic => Ok(Some(head_forward(&self.head, hidden, &self.clamp)?)),
            HeadKind::Deterministic => Ok(None),
        }
    }

    pub fn distribution(&self, features: &[T]) -> Result<Option<AttributeDistribution<T>>> {
        self.distribution_from_hidden(&self.hidden(features)?)
    }

    /// Point attribute scores: the means for a probabilistic head.
    pub fn scores_from_hidden(&self, hidden: &[T]) -> Result<Vec<T>> {
        match self.head_kind {
            HeadKind::Probabilistic => {
                Ok(head_forward(&self.head, hidden, &self.clamp)?.mu().to_vec())
            }
            HeadKind::Deterministic => deterministic_forward(&self.head, hidden),
        }
    }

    pub fn weights_from_hidden(&self, hidden: &[T]) -> Result<CombinationWeights<T>> {
        match &self.combination {
            Combination::Fixed(w) => Ok(CombinationWeights::new(w.clone(), WeightSource::Fixed)),
            Combination::Gated(g) => gating_forward(g, hidden),
        }
    }

    /// Full forward pass. Rewards are computed from the means, never a sample.
    pub fn evaluate(&self, features: &[T]) -> Result<ModelOutput<T>> {
        let hidden = self.hidden(features)?;
        let distribution = self.distribution_from_hidden(&hidden)?;
        let scores = match &distribution {
            Some(d) => d.mu().to_vec(),
            None => deterministic_forward(&self.head, &hidden)?,
        };
        let weights = self.weights_from_hidden(&hidden)?;
        let reward = combine(&scores, &weights)?;
        Ok(ModelOutput {
            scores,
            distribution,
            weights,
            reward,
        })
    }

    pub fn reward(&self, features: &[T]) -> Result<T> {
        Ok(self.evaluate(features)?.reward)
    }

    /// All trainable trunk and head parameters, trunk first.
    pub fn backbone_params(&self) -> Vec<T> {
        let mut p = Vec::new();
        if let Some(t) = &self.trunk {
            p.extend_from_slice(t.params());
        }
        p.extend_from_slice(self.head.params());
        p
    }

    pub fn set_backbone_params(&mut self, params: &[T]) -> Result<()> {
        let split = self.trunk.as_ref().map_or(0, |t| t.num_params());
        if params.len() != split + self.head.num_params() {
            return config_err("backbone parameter vector has the wrong length");
        }
        if let Some(t) = &mut self.trunk {
            t.set_params(&params[..split])?;
        }
        self.head.set_params(&params[split..])
    }

    /// Whether two models can be interpolated parameter by parameter.
    pub fn same_architecture(&self, other: &Self) -> bool {
        let trunks = match (&self.trunk, &other.trunk) {
            (None, None) => true,
            (Some(a), Some(b)) => a.same_architecture(b),
            _ => false,
        };
        let combos = match (&self.combination, &other.combination) {
            (Combination::Fixed(a), Combination::Fixed(b)) => a.len() == b.len(),
            (Combination::Gated(a), Combination::Gated(b)) => a.net().same_architecture(b.net()),
            _ => false,
        };
        self.schema == other.schema
            && self.head_kind == other.head_kind
            && self.clamp == other.clamp
            && trunks
            && combos
            && self.head.same_architecture(&other.head)
    }
}

/// Frobenius norm of a diagonal covariance with the given log-stds.
pub fn diagonal_cov_norm<T: Scalar>(dist: &AttributeDistribution<T>) -> T {
    let four = T::lit(4.0);
    dist.log_std()
        .iter()
        .map(|&s| (four * s).exp())
        .sum::<T>()
        .sqrt()
}

impl<T: Scalar> RewardScorer<T> for UrmModel<T> {
    fn score(&self, features: &[T]) -> Result<Score<T>> {
        let out = self.evaluate(features)?;
        Ok(Score {
            reward: out.reward,
            aleatoric: out.distribution.as_ref().map(aleatoric_uncertainty),
            u1: None,
            u2: out.distribution.as_ref().map(diagonal_cov_norm),
        })
    }

    fn default_uncertainty(&self) -> UncertaintyKind {
        UncertaintyKind::Aleatoric
    }

    fn input_dim(&self) -> usize {
        self.schema.input_dim
    }
}
