//! Sparse autoencoders and teacher training.
//!
//! Each autoencoder minimizes
//!
//! ```text
//! J = 1/N Σ ½‖h(x) − x‖²  +  λ/2 Σ W²  +  β Σ_j KL(ρ ‖ ρ̂_j)
//! ```
//!
//! where `ρ̂_j` is the mean activation of hidden unit `j` over the whole batch.
//! The weight-decay sum covers encoder and decoder weights, never biases.
//!
//! A teacher is built greedily: autoencoder `i` is trained on the hidden
//! representation produced by the encoders before it, the encoders are stacked
//! under a fresh softmax classifier, and the whole network is then fine-tuned
//! on the labels.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{self, random_layer, Activation, Gradients, Layer, LayerGrad, Network};
use crate::{Error, Result};

/// Clamp applied to ρ̂ before the KL term.
pub const RHO_HAT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeHyperParams {
    /// Weight decay λ.
    pub lambda_decay: f64,
    /// Target mean activation ρ, strictly inside (0, 1).
    pub rho: f64,
    /// Sparsity weight β.
    pub beta: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub activation: Activation,
    pub decoder_activation: Activation,
}

impl Default for SaeHyperParams {
    fn default() -> Self {
        SaeHyperParams {
            lambda_decay: 0.05,
            rho: 0.1,
            beta: 0.8,
            epochs: 200,
            learning_rate: 0.5,
            activation: Activation::Sigmoid,
            decoder_activation: Activation::Identity,
        }
    }
}

impl SaeHyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Domain(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if !(self.lambda_decay >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("lambda_decay and beta must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Untied encoder/decoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub encoder: Layer,
    pub decoder: Layer,
}

impl Autoencoder {
    pub fn new(encoder: Layer, decoder: Layer) -> Result<Self> {
        if decoder.n_in() != encoder.n_out() || decoder.n_out() != encoder.n_in() {
            return Err(Error::Shape(format!(
                "decoder {}x{} does not invert encoder {}x{}",
                decoder.n_out(),
                decoder.n_in(),
                encoder.n_out(),
                encoder.n_in()
            )));
        }
        Ok(Autoencoder { encoder, decoder })
    }

    pub fn random(n_in: usize, hidden: usize, hp: &SaeHyperParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = random_layer(n_in, hidden, hp.activation, &mut rng);
        let decoder = random_layer(hidden, n_in, hp.decoder_activation, &mut rng);
        Autoencoder { encoder, decoder }
    }

    pub fn encode(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.encoder.forward(x)
    }

    pub fn reconstruct(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.decoder.forward(self.encode(x).view())
    }
}

/// The three terms of the autoencoder cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AeLoss {
    pub reconstruction: f64,
    pub decay: f64,
    pub sparsity: f64,
}

impl AeLoss {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.decay + self.sparsity
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeGrads {
    pub encoder: LayerGrad,
    pub decoder: LayerGrad,
}

/// `KL(ρ ‖ ρ̂)` between Bernoulli distributions, with `ρ̂` clamped to `[ε, 1−ε]`.
pub fn bernoulli_kl(rho: f64, rho_hat: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Domain(format!("rho must lie in (0, 1), got {rho}")));
    }
    let q = rho_hat.clamp(RHO_HAT_EPS, 1.0 - RHO_HAT_EPS);
    Ok(rho * (rho / q).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - q)).ln())
}

/// d KL(ρ‖ρ̂)/dρ̂; zero where the clamp is active.
fn bernoulli_kl_grad(rho: f64, rho_hat: f64) -> f64 {
    if !(RHO_HAT_EPS..=1.0 - RHO_HAT_EPS).contains(&rho_hat) {
        return 0.0;
    }
    -rho / rho_hat + (1.0 - rho) / (1.0 - rho_hat)
}

fn sum_sq(w: &Array2<f64>) -> f64 {
    w.iter().map(|v| v * v).sum()
}

/// Autoencoder cost and its gradient over every encoder/decoder parameter.
///
/// The sparsity gradient flows through the batch mean `ρ̂`, so every sample
/// receives `β·KL'(ρ̂_j)/N` on hidden unit `j`.
pub fn ae_loss_and_grad(
    ae: &Autoencoder,
    x: ArrayView2<'_, f64>,
    hp: &SaeHyperParams,
) -> Result<(AeLoss, AeGrads)> {
    hp.validate()?;
    if x.nrows() == 0 {
        return Err(Error::Data("autoencoder batch is empty".into()));
    }
    if x.ncols() != ae.encoder.n_in() {
        return Err(Error::Shape(format!(
            "batch has {} columns but the encoder expects {}",
            x.ncols(),
            ae.encoder.n_in()
        )));
    }
    let n = x.nrows() as f64;
    let h = ae.encoder.forward(x);
    let r = ae.decoder.forward(h.view());
    let residual = &r - &x;

    let reconstruction = 0.5 * residual.iter().map(|v| v * v).sum::<f64>() / n;
    let decay = 0.5 * hp.lambda_decay * (sum_sq(&ae.encoder.weights) + sum_sq(&ae.decoder.weights));
    let rho_hat: Array1<f64> = h.mean_axis(Axis(0)).expect("non-empty batch");
    let mut sparsity = 0.0;
    for &q in &rho_hat {
        sparsity += bernoulli_kl(hp.rho, q)?;
    }
    sparsity *= hp.beta;
    let loss = AeLoss {
        reconstruction,
        decay,
        sparsity,
    };
    for (name, v) in [("reconstruction", reconstruction), ("decay", decay), ("sparsity", sparsity)] {
        if !v.is_finite() {
            return Err(Error::Numeric {
                term: format!("autoencoder {name} term"),
            });
        }
    }

    let dec_act = ae.decoder.activation;
    let mut dz_dec = residual / n;
    dz_dec.zip_mut_with(&r, |d, &a| *d *= dec_act.derivative_from_output(a));
    let mut decoder = LayerGrad::from_delta(dz_dec.view(), h.view());
    decoder.weights.scaled_add(hp.lambda_decay, &ae.decoder.weights);

    let mut dh = dz_dec.dot(&ae.decoder.weights);
    let sparse_grad: Array1<f64> = rho_hat.mapv(|q| hp.beta * bernoulli_kl_grad(hp.rho, q) / n);
    dh += &sparse_grad;
    let enc_act = ae.encoder.activation;
    dh.zip_mut_with(&h, |d, &a| *d *= enc_act.derivative_from_output(a));
    let mut encoder = LayerGrad::from_delta(dh.view(), x);
    encoder.weights.scaled_add(hp.lambda_decay, &ae.encoder.weights);

    Ok((loss, AeGrads { encoder, decoder }))
}

/// A trained autoencoder and its loss trajectory (`epochs + 1` entries: the
/// initial loss, then the loss after every step).
#[derive(Debug, Clone)]
pub struct AeTraining {
    pub autoencoder: Autoencoder,
    pub losses: Vec<f64>,
}

pub fn train_autoencoder(
    x: ArrayView2<'_, f64>,
    hidden_size: usize,
    hp: &SaeHyperParams,
    seed: u64,
) -> Result<AeTraining> {
    if hidden_size == 0 {
        return Err(Error::Config("hidden_size must be at least 1".into()));
    }
    hp.validate()?;
    let mut ae = Autoencoder::random(x.ncols(), hidden_size, hp, seed);
    let mut losses = Vec::with_capacity(hp.epochs + 1);
    for epoch in 0..=hp.epochs {
        let (loss, grads) = ae_loss_and_grad(&ae, x, hp).map_err(|e| match e {
            Error::Numeric { term } => Error::Training {
                epoch,
                reason: format!("non-finite {term}"),
            },
            other => other,
        })?;
        losses.push(loss.total());
        if epoch == hp.epochs {
            break;
        }
        let lr = hp.learning_rate;
        ae.encoder.weights.scaled_add(-lr, &grads.encoder.weights);
        ae.encoder.bias.scaled_add(-lr, &grads.encoder.bias);
        ae.decoder.weights.scaled_add(-lr, &grads.decoder.weights);
        ae.decoder.bias.scaled_add(-lr, &grads.decoder.bias);
    }
    Ok(AeTraining {
        autoencoder: ae,
        losses,
    })
}

/// Supervised loss used while fine-tuning a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassLoss {
    /// Mean over samples of `‖softmax − onehot‖²`.
    #[default]
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// Hidden widths, e.g. `[70, 30, 20]`.
    pub hidden: Vec<usize>,
    /// Defaults to `max(label) + 1`.
    pub n_classes: Option<usize>,
    pub sae: SaeHyperParams,
    pub ft_epochs: usize,
    pub ft_learning_rate: f64,
    pub ft_loss: ClassLoss,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            hidden: vec![70, 30, 20],
            n_classes: None,
            sae: SaeHyperParams::default(),
            ft_epochs: 500,
            ft_learning_rate: 2.0,
            ft_loss: ClassLoss::Mse,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub network: Network,
    pub autoencoders: Vec<AeTraining>,
    /// Supervised loss before each fine-tuning step and after the last one.
    pub finetune_losses: Vec<f64>,
}

/// Seed for pretraining stage `stage`; stage `hidden.len()` seeds the classifier.
pub fn stage_seed(seed: u64, stage: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64 + 1);
    rng.random()
}

pub(crate) fn check_labels(y: &[usize], n_rows: usize, n_classes: usize) -> Result<()> {
    if y.len() != n_rows {
        return Err(Error::Shape(format!("{} labels for {n_rows} samples", y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Data(format!("label {bad} outside 0..{n_classes}")));
    }
    Ok(())
}

pub fn supervised_loss_and_grad(
    net: &Network,
    x: ArrayView2<'_, f64>,
    y: &[usize],
    loss: ClassLoss,
) -> Result<(f64, Gradients)> {
    let trace = nn::forward(net, x)?;
    let (value, d_logits) = match loss {
        ClassLoss::Mse => (
            nn::mse_loss(&trace.probabilities, y),
            nn::mse_logit_grad(&trace.probabilities, y),
        ),
        ClassLoss::CrossEntropy => (
            crate::adapt::cross_entropy_loss(&trace, y)?,
            nn::cross_entropy_logit_grad(&trace.probabilities, y),
        ),
    };
    Ok((value, nn::backward(net, &trace, d_logits.view(), None)))
}

/// Greedy layer-wise pretraining followed by supervised fine-tuning.
pub fn train_teacher(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    cfg: &TeacherConfig,
    seed: u64,
) -> Result<TeacherRun> {
    if cfg.hidden.is_empty() || cfg.hidden.contains(&0) {
        return Err(Error::Config(format!("hidden widths must be non-empty and positive: {:?}", cfg.hidden)));
    }
    if x.nrows() == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    cfg.sae.validate()?;
    let n_classes = match cfg.n_classes {
        Some(c) => c,
        None => y.iter().max().map_or(0, |m| m + 1),
    };
    if n_classes == 0 {
        return Err(Error::Data("no classes".into()));
    }
    check_labels(y, x.nrows(), n_classes)?;

    let mut autoencoders = Vec::with_capacity(cfg.hidden.len());
    let mut representation = x.to_owned();
    for (i, &width) in cfg.hidden.iter().enumerate() {
        let run = train_autoencoder(representation.view(), width, &cfg.sae, stage_seed(seed, i))?;
        representation = run.autoencoder.encode(representation.view());
        autoencoders.push(run);
    }
    let hidden: Vec<Layer> = autoencoders.iter().map(|r| r.autoencoder.encoder.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, cfg.hidden.len()));
    let last = *cfg.hidden.last().expect("non-empty");
    let classifier = random_layer(last, n_classes, Activation::Identity, &mut rng);
    let mut network = Network::new(x.ncols(), hidden, classifier)?;

    let mut finetune_losses = Vec::with_capacity(cfg.ft_epochs + 1);
    for epoch in 0..=cfg.ft_epochs {
        let (loss, grads) = supervised_loss_and_grad(&network, x, y, cfg.ft_loss).map_err(|e| match e {
            Error::NumericOverflow { location } => Error::Training {
                epoch,
                reason: format!("overflow in {location}"),
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: "non-finite fine-tuning loss".into(),
            });
        }
        finetune_losses.push(loss);
        if epoch == cfg.ft_epochs {
            break;
        }
        network.descend(&grads, cfg.ft_learning_rate);
    }
    Ok(TeacherRun {
        network,
        autoencoders,
        finetune_losses,
    })
}
