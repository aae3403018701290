//! Dense feed-forward networks.
//!
//! A [`Network`] is a stack of fully connected hidden [`Layer`]s followed by a
//! linear classifier whose logits go through a row-wise softmax. Batches are
//! row-major: a matrix of `N × input_dim` holds one sample per row.
//!
//! Weight matrices use the `(n_out × n_in)` convention, so a layer computes
//! `Z = A · Wᵀ + b` over a batch `A`.

mod backprop;
mod io;

pub use backprop::{
    backward, backward_hidden, cross_entropy_logit_grad, mse_logit_grad, mse_loss, Gradients,
    LayerGrad,
};
pub use io::{load_model, save_model, write_atomic};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(z),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a = φ(z)`.
    #[inline]
    pub fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A fully connected layer: `φ(W x + b)` with `W` of shape `(n_out × n_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        let layer = Layer {
            weights,
            bias,
            activation,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn zeros(n_in: usize, n_out: usize, activation: Activation) -> Self {
        Layer {
            weights: Array2::zeros((n_out, n_in)),
            bias: Array1::zeros(n_out),
            activation,
        }
    }

    pub fn n_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weights.nrows()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.weights.nrows() != self.bias.len() {
            return Err(Error::Validation(format!(
                "weight rows ({}) differ from bias length ({})",
                self.weights.nrows(),
                self.bias.len()
            )));
        }
        if self.weights.nrows() == 0 || self.weights.ncols() == 0 {
            return Err(Error::Validation("layer with zero width".into()));
        }
        if !self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::Validation("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Pre-activation `A · Wᵀ + b` for a batch.
    pub fn pre_activation(&self, input: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = input.dot(&self.weights.t());
        z += &self.bias;
        z
    }

    pub fn forward(&self, input: ArrayView2<'_, f64>) -> Array2<f64> {
        let act = self.activation;
        let mut z = self.pre_activation(input);
        z.mapv_inplace(|v| act.apply(v));
        z
    }
}

/// Hidden feature extractor plus softmax classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_dim: usize,
    hidden: Vec<Layer>,
    classifier: Layer,
}

impl Network {
    pub fn new(input_dim: usize, hidden: Vec<Layer>, classifier: Layer) -> Result<Self> {
        let net = Network {
            input_dim,
            hidden,
            classifier,
        };
        net.validate()?;
        Ok(net)
    }

    /// Checks the width chain and per-layer invariants.
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Validation("input_dim must be positive".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::Validation("network needs at least one hidden layer".into()));
        }
        let mut width = self.input_dim;
        for (i, layer) in self.hidden.iter().enumerate() {
            layer.validate().map_err(|e| match e {
                Error::Validation(msg) => Error::Validation(format!("hidden layer {}: {msg}", i + 1)),
                other => other,
            })?;
            if layer.n_in() != width {
                return Err(Error::Validation(format!(
                    "hidden layer {} expects {} inputs but previous width is {width}",
                    i + 1,
                    layer.n_in()
                )));
            }
            width = layer.n_out();
        }
        self.classifier.validate().map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("classifier: {msg}")),
            other => other,
        })?;
        if self.classifier.n_in() != width {
            return Err(Error::Validation(format!(
                "classifier expects {} inputs but last hidden width is {width}",
                self.classifier.n_in()
            )));
        }
        if self.classifier.activation != Activation::Identity {
            return Err(Error::Validation("classifier activation must be identity".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> &[Layer] {
        &self.hidden
    }

    pub fn hidden_mut(&mut self) -> &mut [Layer] {
        &mut self.hidden
    }

    pub fn classifier(&self) -> &Layer {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Layer {
        &mut self.classifier
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.n_out()
    }

    /// Hidden widths only, e.g. `[70, 30, 20]`.
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.hidden.iter().map(Layer::n_out).collect()
    }

    /// Full width chain: input, every hidden layer, classes.
    pub fn arch(&self) -> Vec<usize> {
        let mut arch = Vec::with_capacity(self.hidden.len() + 2);
        arch.push(self.input_dim);
        arch.extend(self.hidden_widths());
        arch.push(self.n_classes());
        arch
    }

    pub(crate) fn into_parts(self) -> (usize, Vec<Layer>, Layer) {
        (self.input_dim, self.hidden, self.classifier)
    }

    /// All parameters in a fixed order: each hidden layer's weights then bias,
    /// then the classifier's. [`Gradients::iter`] uses the same order.
    pub fn parameters(&self) -> impl Iterator<Item = &f64> {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn n_parameters(&self) -> usize {
        self.parameters().count()
    }

    /// `θ ← θ − η·g`.
    pub fn descend(&mut self, grads: &Gradients, eta: f64) {
        for (layer, g) in self
            .hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .zip(grads.hidden.iter().chain(std::iter::once(&grads.classifier)))
        {
            layer.weights.scaled_add(-eta, &g.weights);
            layer.bias.scaled_add(-eta, &g.bias);
        }
    }

    /// Activations of the last hidden layer.
    pub fn features(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut trace = forward(self, x)?;
        let n = self.hidden.len();
        Ok(trace.activations.swap_remove(n))
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(forward(self, x)?.predictions())
    }
}

/// Everything computed during a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input batch, `activations[l]` the output of
    /// hidden layer `l`; the last entry holds the h-level features.
    pub activations: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
    pub probabilities: Array2<f64>,
}

impl ForwardTrace {
    pub fn features(&self) -> &Array2<f64> {
        self.activations.last().expect("trace always holds the input")
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.probabilities
            .rows()
            .into_iter()
            .map(|row| argmax(row.iter().copied()))
            .collect()
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

pub fn forward(net: &Network, x: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
    if x.ncols() != net.input_dim {
        return Err(Error::Shape(format!(
            "input has {} columns but hidden layer 1 expects {}",
            x.ncols(),
            net.input_dim
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericOverflow {
            location: "input batch".into(),
        });
    }
    let mut activations = Vec::with_capacity(net.hidden.len() + 1);
    activations.push(x.to_owned());
    for (i, layer) in net.hidden.iter().enumerate() {
        let prev = activations.last().expect("non-empty");
        if prev.ncols() != layer.n_in() {
            return Err(Error::Shape(format!(
                "hidden layer {} expects {} inputs, got {}",
                i + 1,
                layer.n_in(),
                prev.ncols()
            )));
        }
        let a = layer.forward(prev.view());
        if !a.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericOverflow {
                location: format!("hidden layer {}", i + 1),
            });
        }
        activations.push(a);
    }
    let features = activations.last().expect("non-empty");
    if features.ncols() != net.classifier.n_in() {
        return Err(Error::Shape(format!(
            "classifier expects {} inputs, got {}",
            net.classifier.n_in(),
            features.ncols()
        )));
    }
    let logits = net.classifier.pre_activation(features.view());
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericOverflow {
            location: "classifier".into(),
        });
    }
    let probabilities = softmax(logits.view());
    Ok(ForwardTrace {
        activations,
        logits,
        probabilities,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Random network for the width chain `arch = [input, hidden.., classes]`.
///
/// Weights are Gaussian with standard deviation `1/sqrt(fan_in)` (`sqrt(2/fan_in)`
/// for relu); biases start at zero. The classifier is always linear.
pub fn init_random(arch: &[usize], activation: Activation, seed: u64) -> Result<Network> {
    if arch.len() < 3 {
        return Err(Error::Config(format!(
            "architecture needs input, at least one hidden layer and a class count; got {arch:?}"
        )));
    }
    if arch.contains(&0) {
        return Err(Error::Config(format!("architecture widths must be positive: {arch:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = arch.len() - 1;
    let mut layers = Vec::with_capacity(n_layers);
    for (i, pair) in arch.windows(2).enumerate() {
        let act = if i + 1 == n_layers {
            Activation::Identity
        } else {
            activation
        };
        layers.push(random_layer(pair[0], pair[1], act, &mut rng));
    }
    let classifier = layers.pop().expect("arch has at least two layers");
    Network::new(arch[0], layers, classifier)
}

pub(crate) fn random_layer(
    n_in: usize,
    n_out: usize,
    activation: Activation,
    rng: &mut ChaCha8Rng,
) -> Layer {
    let gain = if activation == Activation::Relu { 2.0 } else { 1.0 };
    let std = (gain / n_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let weights = Array2::from_shape_simple_fn((n_out, n_in), || dist.sample(rng));
    Layer {
        weights,
        bias: Array1::zeros(n_out),
        activation,
    }
}
