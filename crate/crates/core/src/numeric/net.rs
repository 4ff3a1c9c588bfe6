use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::scalar::{all_finite, Scalar};

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Scaled exponential linear unit with the self-normalizing constants.
pub fn selu<T: Scalar>(x: T) -> T {
    let lambda = T::lit(SELU_LAMBDA);
    if x > T::zero() {
        lambda * x
    } else {
        lambda * T::lit(SELU_ALPHA) * x.exp_m1()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Selu,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Selu => selu(z),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative<T: Scalar>(self, z: T, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Tanh => T::one() - y * y,
            Activation::Selu => {
                let lambda = T::lit(SELU_LAMBDA);
                if z > T::zero() {
                    lambda
                } else {
                    lambda * T::lit(SELU_ALPHA) * z.exp()
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    pub fn new(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            activation,
        }
    }

    pub fn num_params(&self) -> usize {
        self.outputs * self.inputs + self.outputs
    }
}

/// Stack of affine layers, each followed by an activation.
///
/// Parameters live in one flat vector. Layer `k` occupies a contiguous block:
/// the row-major `outputs x inputs` weight matrix followed by the bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "NetParts<T>",
    into = "NetParts<T>",
    bound = "T: Scalar"
)]
pub struct DenseNet<T> {
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    params: Vec<T>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct NetParts<T> {
    layers: Vec<LayerShape>,
    params: Vec<T>,
}

impl<T: Scalar> TryFrom<NetParts<T>> for DenseNet<T> {
    type Error = crate::error::UrmError;

    fn try_from(parts: NetParts<T>) -> Result<Self> {
        Self::new(parts.layers, parts.params)
    }
}

impl<T: Scalar> From<DenseNet<T>> for NetParts<T> {
    fn from(net: DenseNet<T>) -> Self {
        Self {
            layers: net.layers,
            params: net.params,
        }
    }
}

/// Intermediate values of one forward pass, consumed by [`DenseNet::backward`].
#[derive(Clone, Debug)]
pub struct Trace<T> {
    /// `activations[k]` is the input of layer `k`; the last entry is the net output.
    activations: Vec<Vec<T>>,
    pre_activations: Vec<Vec<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &[T] {
        self.activations.last().expect("trace holds the input")
    }

    pub fn input(&self) -> &[T] {
        &self.activations[0]
    }
}

impl<T: Scalar> DenseNet<T> {
    /// Builds a net from explicit parameters, checking the layer chain.
    pub fn new(layers: Vec<LayerShape>, params: Vec<T>) -> Result<Self> {
        if layers.is_empty() {
            return config_err("a dense net needs at least one layer");
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return config_err(format!(
                    "layer {} outputs {} but layer {} expects {} inputs",
                    k,
                    pair[0].outputs,
                    k + 1,
                    pair[1].inputs
                ));
            }
        }
        if layers.iter().any(|l| l.inputs == 0 || l.outputs == 0) {
            return config_err("layer dimensions must be positive");
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for layer in &layers {
            offsets.push(total);
            total += layer.num_params();
        }
        if params.len() != total {
            return config_err(format!(
                "expected {} parameters for this architecture, got {}",
                total,
                params.len()
            ));
        }
        if !all_finite(&params) {
            return input_err("non-finite network parameter");
        }
        Ok(Self {
            layers,
            offsets,
            params,
        })
    }

    pub fn zeros(layers: Vec<LayerShape>) -> Result<Self> {
        let total = layers.iter().map(LayerShape::num_params).sum();
        Self::new(layers, vec![T::zero(); total])
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init<R: Rng + ?Sized>(layers: Vec<LayerShape>, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layers)?;
        for k in 0..net.layers.len() {
            let bound = 1.0 / (net.layers[k].inputs as f64).sqrt();
            for w in net.weights_mut(k) {
                *w = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(net)
    }

    /// Layer shapes for a multilayer perceptron.
    pub fn mlp_shapes(
        inputs: usize,
        hidden: &[usize],
        outputs: usize,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Vec<LayerShape> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(inputs);
        dims.extend_from_slice(hidden);
        dims.push(outputs);
        let last = dims.len() - 2;
        dims.windows(2)
            .enumerate()
            .map(|(k, w)| {
                let act = if k == last {
                    output_activation
                } else {
                    hidden_activation
                };
                LayerShape::new(w[0], w[1], act)
            })
            .collect()
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn same_architecture(&self, other: &Self) -> bool {
        self.layers == other.layers
    }

    fn weight_range(&self, k: usize) -> std::ops::Range<usize> {
        let l = &self.layers[k];
        self.offsets[k]..self.offsets[k] + l.inputs * l.outputs
    }

    fn bias_range(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.weight_range(k).end;
        start..start + self.layers[k].outputs
    }

    pub fn weights(&self, k: usize) -> &[T] {
        &self.params[self.weight_range(k)]
    }

    pub fn weights_mut(&mut self, k: usize) -> &mut [T] {
        let r = self.weight_range(k);
        &mut self.params[r]
    }

    pub fn bias(&self, k: usize) -> &[T] {
        &self.params[self.bias_range(k)]
    }

    pub fn bias_mut(&mut self, k: usize) -> &mut [T] {
        let r = self.bias_range(k);
        &mut self.params[r]
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            return input_err(format!(
                "input has {} features, net expects {}",
                x.len(),
                self.input_dim()
            ));
        }
        Ok(())
    }

    fn affine(&self, k: usize, x: &[T]) -> Vec<T> {
        let w = self.weights(k);
        let b = self.bias(k);
        let n_in = self.layers[k].inputs;
        b.iter()
            .enumerate()
            .map(|(o, &bias)| {
                let row = &w[o * n_in..(o + 1) * n_in];
                row.iter().zip(x).fold(bias, |acc, (&wi, &xi)| acc + wi * xi)
            })
            .collect()
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            a = self
                .affine(k, &a)
                .into_iter()
                .map(|z| layer.activation.apply(z))
                .collect();
        }
        Ok(a)
    }

    pub fn forward_traced(&self, x: &[T]) -> Result<Trace<T>> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for (k, layer) in self.layers.iter().enumerate() {
            let z = self.affine(k, &activations[k]);
            let a = z.iter().map(|&zi| layer.activation.apply(zi)).collect();
            pre_activations.push(z);
            activations.push(a);
        }
        Ok(Trace {
            activations,
            pre_activations,
        })
    }

    /// Backpropagates `grad_output` through a traced pass.
    ///
    /// Parameter gradients are *added* into `grad_params` (same layout as
    /// [`params`](Self::params)); the gradient with respect to the input is
    /// returned.
    pub fn backward(&self, trace: &Trace<T>, grad_output: &[T], grad_params: &mut [T]) -> Vec<T> {
        assert_eq!(grad_output.len(), self.output_dim());
        assert_eq!(grad_params.len(), self.num_params());
        let mut upstream = grad_output.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = self.layers[k];
            let z = &trace.pre_activations[k];
            let y = &trace.activations[k + 1];
            let x = &trace.activations[k];
            let delta: Vec<T> = upstream
                .iter()
                .zip(z.iter().zip(y))
                .map(|(&g, (&zi, &yi))| g * layer.activation.derivative(zi, yi))
                .collect();

            let w_off = self.offsets[k];
            let b_off = w_off + layer.inputs * layer.outputs;
            for (o, &d) in delta.iter().enumerate() {
                grad_params[b_off + o] = grad_params[b_off + o] + d;
                let row = &mut grad_params[w_off + o * layer.inputs..w_off + (o + 1) * layer.inputs];
                for (g, &xi) in row.iter_mut().zip(x) {
                    *g = *g + d * xi;
                }
            }

            let w = self.weights(k);
            let mut next = vec![T::zero(); layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
                for (acc, &wi) in next.iter_mut().zip(row) {
                    *acc = *acc + d * wi;
                }
            }
            upstream = next;
        }
        upstream
    }

    /// Replaces all parameters; lengths must match.
    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.params.len() {
            return config_err("parameter vector length does not match the architecture");
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> DenseNet<U> {
        DenseNet {
            layers: self.layers.clone(),
            offsets: self.offsets.clone(),
            params: self.params.iter().map(|p| U::lit(p.as_f64())).collect(),
        }
    }
}
