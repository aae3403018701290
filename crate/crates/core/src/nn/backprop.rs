use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{ForwardTrace, Layer, Network};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &Layer) -> Self {
        LayerGrad {
            weights: Array2::zeros(layer.weights.raw_dim()),
            bias: Array1::zeros(layer.bias.len()),
        }
    }

    /// Gradient of a layer from the upstream pre-activation gradient `dz`
    /// and the layer's input batch.
    pub(crate) fn from_delta(dz: ArrayView2<'_, f64>, input: ArrayView2<'_, f64>) -> Self {
        LayerGrad {
            weights: dz.t().dot(&input),
            bias: dz.sum_axis(Axis(0)),
        }
    }

    fn scaled_add(&mut self, alpha: f64, other: &LayerGrad) {
        self.weights.scaled_add(alpha, &other.weights);
        self.bias.scaled_add(alpha, &other.bias);
    }
}

/// Gradient of a scalar loss with respect to every network parameter,
/// split into the feature extractor (`hidden`) and the classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden: Vec<LayerGrad>,
    pub classifier: LayerGrad,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            hidden: net.hidden().iter().map(LayerGrad::zeros_like).collect(),
            classifier: LayerGrad::zeros_like(net.classifier()),
        }
    }

    /// `self += alpha · other`.
    pub fn scaled_add(&mut self, alpha: f64, other: &Gradients) {
        for (a, b) in self.hidden.iter_mut().zip(&other.hidden) {
            a.scaled_add(alpha, b);
        }
        self.classifier.scaled_add(alpha, &other.classifier);
    }

    /// Same order as [`Network::parameters`].
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|g| g.weights.iter().chain(g.bias.iter()))
    }

    /// Fails with the location of the first non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        let named = self
            .hidden
            .iter()
            .enumerate()
            .map(|(i, g)| (format!("hidden layer {}", i + 1), g))
            .chain(std::iter::once(("classifier".to_string(), &self.classifier)));
        for (name, g) in named {
            if let Some(((r, c), _)) = g.weights.indexed_iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::Numeric {
                    term: format!("gradient of {name} weight [{r}, {c}]"),
                });
            }
            if let Some((j, _)) = g.bias.indexed_iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::Numeric {
                    term: format!("gradient of {name} bias [{j}]"),
                });
            }
        }
        Ok(())
    }
}

/// Backpropagates a gradient on the h-level features through the hidden
/// layers. `d_features` has the shape of the last hidden activation.
pub fn backward_hidden(
    net: &Network,
    trace: &ForwardTrace,
    d_features: Array2<f64>,
) -> Vec<LayerGrad> {
    let layers = net.hidden();
    let mut grads = Vec::with_capacity(layers.len());
    let mut d_a = d_features;
    for (l, layer) in layers.iter().enumerate().rev() {
        let out = &trace.activations[l + 1];
        let act = layer.activation;
        let mut dz = d_a;
        dz.zip_mut_with(out, |d, &a| *d *= act.derivative_from_output(a));
        let input = &trace.activations[l];
        grads.push(LayerGrad::from_delta(dz.view(), input.view()));
        if l > 0 {
            d_a = dz.dot(&layer.weights);
        } else {
            break;
        }
    }
    grads.reverse();
    grads
}

/// Full backward pass from a gradient on the logits, with an optional extra
/// gradient injected directly at the h-level features.
pub fn backward(
    net: &Network,
    trace: &ForwardTrace,
    d_logits: ArrayView2<'_, f64>,
    extra_features_grad: Option<&Array2<f64>>,
) -> Gradients {
    let features = trace.features();
    let classifier = LayerGrad::from_delta(d_logits, features.view());
    let mut d_features = d_logits.dot(&net.classifier().weights);
    if let Some(extra) = extra_features_grad {
        d_features += extra;
    }
    let hidden = backward_hidden(net, trace, d_features);
    Gradients { hidden, classifier }
}

/// Gradient on the logits of the mean cross-entropy `−(1/N)Σ log p[y]`.
pub fn cross_entropy_logit_grad(probabilities: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let n = probabilities.nrows() as f64;
    let mut d = probabilities.clone();
    for (r, &y) in labels.iter().enumerate() {
        d[[r, y]] -= 1.0;
    }
    d /= n;
    d
}

/// Gradient on the logits of `(1/N) Σ_n ‖p_n − onehot(y_n)‖²` through the softmax.
pub fn mse_logit_grad(probabilities: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let n = probabilities.nrows() as f64;
    let mut d = Array2::zeros(probabilities.raw_dim());
    for (r, (p, &y)) in probabilities.rows().into_iter().zip(labels).enumerate() {
        // dL/dp_c = 2(p_c − t_c)/N, then the softmax Jacobian.
        let dp: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(c, &pc)| 2.0 * (pc - if c == y { 1.0 } else { 0.0 }) / n)
            .collect();
        let dot: f64 = dp.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
        for c in 0..p.len() {
            d[[r, c]] = p[c] * (dp[c] - dot);
        }
    }
    d
}

pub fn mse_loss(probabilities: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = probabilities.nrows() as f64;
    let mut total = 0.0;
    for (p, &y) in probabilities.rows().into_iter().zip(labels) {
        for (c, &pc) in p.iter().enumerate() {
            let t = if c == y { 1.0 } else { 0.0 };
            total += (pc - t) * (pc - t);
        }
    }
    total / n
}
