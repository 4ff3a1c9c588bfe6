//! Uncertainty-aware reward models.
//!
//! A reward model here maps a feature vector (the stand-in for a language
//! model's last hidden state) to a Gaussian over each preference attribute,
//! combines the attribute means into a scalar reward, and reports how much
//! that reward can be trusted:
//!
//! - **aleatoric** uncertainty: the sum of predicted attribute variances;
//! - **epistemic** uncertainty: disagreement inside an ensemble of
//!   independently trained models (largest reward gap `u1`, largest
//!   covariance norm `u2`).
//!
//! The math is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the scalar for the common cases.

pub mod ensemble;
pub mod error;
pub mod gating;
pub mod harness;
pub mod head;
pub mod model;
pub mod numeric;
pub mod scalar;
pub mod trainer;
pub mod world;

pub use error::{Result, UrmError};
pub use model::{LossKind, RewardScorer, Schema, Score, UncertaintyKind};
pub use scalar::Scalar;

pub type Net = numeric::DenseNet<f64>;
pub type Net32 = numeric::DenseNet<f32>;
pub type Urm = model::UrmModel<f64>;
pub type Urm32 = model::UrmModel<f32>;
pub type Ensemble = ensemble::Urme<f64>;
pub type Ensemble32 = ensemble::Urme<f32>;
pub type World = world::GroundTruthWorld<f64>;
pub type World32 = world::GroundTruthWorld<f32>;
pub type Record = world::Record<f64>;
pub type Pair = world::PreferencePair<f64>;
pub type Distribution = head::AttributeDistribution<f64>;
