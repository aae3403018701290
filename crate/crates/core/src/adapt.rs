//! Joint fine-tuning of a transformed student.
//!
//! The objective is `J = J_c + λ·J_mmd`: mean cross-entropy of the softmax
//! head on the labeled source batch, plus class-wise squared MMD between
//! source and target h-level features. Feature-extractor parameters see both
//! terms; classifier parameters see only `J_c`.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::mmd::{self, KernelSpec};
use crate::nn::{self, ForwardTrace, Gradients, Network};
use crate::sae::check_labels;
use crate::{Error, Result};

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Bold-driver learning rates below this abort the run.
pub const MIN_ETA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrRule {
    /// Grow η by 5% after an improving step; halve and retry once after a worsening one.
    #[default]
    BoldDriver,
    Fixed,
}

/// Kernel used for the MMD term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    /// RBF with the median pairwise distance of the pooled initial features,
    /// held fixed for the whole run.
    #[default]
    AutoMedian,
    Fixed(KernelSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub lambda_mmd: f64,
    pub iterations: usize,
    pub eta0: f64,
    pub lr_rule: LrRule,
    pub kernel: KernelChoice,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lambda_mmd: 1.0,
            iterations: 50,
            eta0: 2.0,
            lr_rule: LrRule::BoldDriver,
            kernel: KernelChoice::AutoMedian,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::Config(format!("eta0 must be positive, got {}", self.eta0)));
        }
        if !(self.lambda_mmd >= 0.0 && self.lambda_mmd.is_finite()) {
            return Err(Error::Config("lambda_mmd must be non-negative".into()));
        }
        if let KernelChoice::Fixed(k) = &self.kernel {
            k.validate()?;
        }
        Ok(())
    }
}

/// Labeled source and target batches for one adaptation problem.
#[derive(Debug, Clone, Copy)]
pub struct Batches<'a> {
    pub source: ArrayView2<'a, f64>,
    pub source_labels: &'a [usize],
    pub target: ArrayView2<'a, f64>,
    pub target_labels: &'a [usize],
}

impl Batches<'_> {
    fn validate(&self, net: &Network) -> Result<()> {
        if self.source.ncols() != self.target.ncols() {
            return Err(Error::Shape(format!(
                "source has {} features but target has {}",
                self.source.ncols(),
                self.target.ncols()
            )));
        }
        let c = net.n_classes();
        check_labels(self.source_labels, self.source.nrows(), c)?;
        check_labels(self.target_labels, self.target.nrows(), c)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLoss {
    pub total: f64,
    pub class_term: f64,
    pub mmd_term: f64,
}

impl JointLoss {
    fn new(class_term: f64, mmd_term: f64, lambda: f64) -> Self {
        JointLoss {
            total: class_term + lambda * mmd_term,
            class_term,
            mmd_term,
        }
    }
}

/// Mean `−log p[y]` with probabilities floored at [`PROB_FLOOR`].
pub fn cross_entropy_loss(trace: &ForwardTrace, y: &[usize]) -> Result<f64> {
    let p = &trace.probabilities;
    check_labels(y, p.nrows(), p.ncols())?;
    if y.is_empty() {
        return Err(Error::Data("cross-entropy of an empty batch".into()));
    }
    let total: f64 = y
        .iter()
        .enumerate()
        .map(|(r, &c)| -p[[r, c]].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / y.len() as f64)
}

fn resolve_kernel(choice: &KernelChoice, fs: &Array2<f64>, ft: &Array2<f64>) -> Result<KernelSpec> {
    match choice {
        KernelChoice::Fixed(k) => Ok(*k),
        KernelChoice::AutoMedian => KernelSpec::rbf(mmd::median_bandwidth(fs.view(), ft.view())?),
    }
}

struct Evaluated {
    loss: JointLoss,
    source: ForwardTrace,
    target: ForwardTrace,
}

fn evaluate_joint(net: &Network, b: &Batches<'_>, lambda: f64, kernel: &KernelChoice) -> Result<(Evaluated, KernelSpec)> {
    b.validate(net)?;
    let source = nn::forward(net, b.source)?;
    let target = nn::forward(net, b.target)?;
    let k = resolve_kernel(kernel, source.features(), target.features())?;
    let class_term = cross_entropy_loss(&source, b.source_labels)?;
    let mmd_term = mmd::classwise_mmd2(
        source.features().view(),
        b.source_labels,
        target.features().view(),
        b.target_labels,
        net.n_classes(),
        &k,
    )?;
    Ok((
        Evaluated {
            loss: JointLoss::new(class_term, mmd_term, lambda),
            source,
            target,
        },
        k,
    ))
}

/// `J_c` on the source batch, `J_mmd` on the h-level features of both domains.
///
/// An [`KernelChoice::AutoMedian`] kernel is resolved on the features of the
/// network as given.
pub fn joint_loss(net: &Network, b: &Batches<'_>, cfg: &AdaptConfig) -> Result<JointLoss> {
    Ok(evaluate_joint(net, b, cfg.lambda_mmd, &cfg.kernel)?.0.loss)
}

/// Gradient of [`joint_loss`]. The bandwidth of an auto kernel is treated as
/// a constant.
pub fn joint_grad(net: &Network, b: &Batches<'_>, cfg: &AdaptConfig) -> Result<Gradients> {
    let (ev, k) = evaluate_joint(net, b, cfg.lambda_mmd, &cfg.kernel)?;
    gradient_from(net, b, &ev, cfg.lambda_mmd, &k)
}

fn gradient_from(
    net: &Network,
    b: &Batches<'_>,
    ev: &Evaluated,
    lambda: f64,
    k: &KernelSpec,
) -> Result<Gradients> {
    let d_logits = nn::cross_entropy_logit_grad(&ev.source.probabilities, b.source_labels);
    let grads = if lambda == 0.0 {
        nn::backward(net, &ev.source, d_logits.view(), None)
    } else {
        let (_, gs, gt) = mmd::classwise_mmd2_with_grad(
            ev.source.features().view(),
            b.source_labels,
            ev.target.features().view(),
            b.target_labels,
            net.n_classes(),
            k,
        )?;
        let mut grads = nn::backward(net, &ev.source, d_logits.view(), Some(&(gs * lambda)));
        // The target batch reaches the loss only through the MMD term, so its
        // gradient stops at the h-level features and never touches the classifier.
        let target_hidden = nn::backward_hidden(net, &ev.target, gt * lambda);
        for (g, t) in grads.hidden.iter_mut().zip(&target_hidden) {
            g.weights += &t.weights;
            g.bias += &t.bias;
        }
        grads
    };
    grads.check_finite()?;
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub loss_total: f64,
    pub loss_class: f64,
    pub loss_mmd: f64,
    /// Learning rate of the accepted step.
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[i][j]` counts samples of class `i` predicted as `j`.
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub lambda_mmd: f64,
    pub kernel: KernelSpec,
    /// Losses of the student before the first step.
    pub initial: JointLoss,
    pub records: Vec<IterationRecord>,
    /// Metrics on the labeled target batch after the last step.
    pub final_metrics: Option<Metrics>,
}

impl AdaptReport {
    /// `iter,loss_total,loss_class,loss_mmd,eta`, one row per iteration.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,loss_total,loss_class,loss_mmd,eta\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{:?},{:?},{:?},{:?}",
                r.iter, r.loss_total, r.loss_class, r.loss_mmd, r.eta
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn final_loss(&self) -> JointLoss {
        self.records.last().map_or(self.initial, |r| JointLoss {
            total: r.loss_total,
            class_term: r.loss_class,
            mmd_term: r.loss_mmd,
        })
    }
}

/// Full-batch gradient descent on the joint objective.
///
/// With [`LrRule::BoldDriver`], an improving step multiplies η by 1.05; a
/// worsening step is undone, η is halved and the step retried once. If the
/// retry still does not improve, parameters stay put for that iteration.
pub fn fine_tune(net: &Network, b: &Batches<'_>, cfg: &AdaptConfig) -> Result<(Network, AdaptReport)> {
    cfg.validate()?;
    let mut current = net.clone();
    let (mut ev, kernel) = evaluate_joint(&current, b, cfg.lambda_mmd, &cfg.kernel)?;
    let fixed = KernelChoice::Fixed(kernel);
    let mut report = AdaptReport {
        lambda_mmd: cfg.lambda_mmd,
        kernel,
        initial: ev.loss,
        records: Vec::with_capacity(cfg.iterations),
        final_metrics: None,
    };
    let mut eta = cfg.eta0;
    for iter in 1..=cfg.iterations {
        let grads = gradient_from(&current, b, &ev, cfg.lambda_mmd, &kernel)?;
        let step = |eta: f64| -> Result<(Network, Evaluated)> {
            let mut cand = current.clone();
            cand.descend(&grads, eta);
            let (e, _) = evaluate_joint(&cand, b, cfg.lambda_mmd, &fixed)?;
            Ok((cand, e))
        };
        let used_eta;
        match cfg.lr_rule {
            LrRule::Fixed => {
                let (cand, e) = step(eta)?;
                current = cand;
                ev = e;
                used_eta = eta;
            }
            LrRule::BoldDriver => {
                let before = ev.loss.total;
                // Overflowing candidates count as worsening steps.
                let improving = |r: Result<(Network, Evaluated)>| match r {
                    Ok((cand, e)) if e.loss.total < before => Ok(Some((cand, e))),
                    Ok(_) | Err(Error::NumericOverflow { .. }) | Err(Error::Numeric { .. }) => Ok(None),
                    Err(other) => Err(other),
                };
                if let Some((cand, e)) = improving(step(eta))? {
                    used_eta = eta;
                    current = cand;
                    ev = e;
                    eta *= 1.05;
                } else {
                    eta *= 0.5;
                    if let Some((cand, e)) = improving(step(eta))? {
                        used_eta = eta;
                        current = cand;
                        ev = e;
                    } else {
                        used_eta = 0.0;
                        eta *= 0.5;
                    }
                }
                if eta < MIN_ETA {
                    report.records.push(record(iter, &ev.loss, used_eta));
                    return Err(Error::Convergence {
                        report: Box::new(report),
                    });
                }
            }
        }
        report.records.push(record(iter, &ev.loss, used_eta));
    }
    report.final_metrics = Some(evaluate(&current, b.target, b.target_labels)?);
    Ok((current, report))
}

fn record(iter: usize, loss: &JointLoss, eta: f64) -> IterationRecord {
    IterationRecord {
        iter,
        loss_total: loss.total,
        loss_class: loss.class_term,
        loss_mmd: loss.mmd_term,
        eta,
    }
}

/// Accuracy, per-class accuracy and confusion matrix of the argmax prediction.
pub fn evaluate(net: &Network, x: ArrayView2<'_, f64>, y: &[usize]) -> Result<Metrics> {
    if x.nrows() == 0 {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let c = net.n_classes();
    check_labels(y, x.nrows(), c)?;
    let pred = net.predict(x)?;
    Ok(metrics_from(&pred, y, c))
}

pub fn metrics_from(pred: &[usize], y: &[usize], n_classes: usize) -> Metrics {
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in pred.iter().zip(y) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|i| confusion[i][i]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[i] as f64 / n as f64
            }
        })
        .collect();
    Metrics {
        accuracy: correct as f64 / y.len() as f64,
        per_class_accuracy,
        confusion,
    }
}
