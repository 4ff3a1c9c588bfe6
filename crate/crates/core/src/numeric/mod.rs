//! Differentiable numeric substrate: dense nets with hand-written backprop,
//! the Adam optimizer, and a central-difference gradient checker.

mod adam;
mod gradcheck;
mod net;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::finite_diff_check;
pub use net::{selu, Activation, DenseNet, LayerShape, Trace, SELU_ALPHA, SELU_LAMBDA};
