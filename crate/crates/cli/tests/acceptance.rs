//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::path::Path;
use std::time::{Duration, Instant};

use clap::Parser;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use quickadapt::adapt::{self, AdaptConfig, Batches, KernelChoice, LrRule};
use quickadapt::data::{segment, TimeSeries};
use quickadapt::mmd::{self, KernelSpec};
use quickadapt::net2net::{deepen, widen};
use quickadapt::nn::{forward, init_random};
use quickadapt::sae::{ae_loss_and_grad, Autoencoder, SaeHyperParams};
use quickadapt::{Activation, Network};
use quickadapt_cli::{run, Cli};

type Outcome = Result<String, String>;
/// Name, check, runtime budget in seconds.
type Criterion = (&'static str, fn() -> Outcome, u64);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaussian(rows: usize, cols: usize, mean: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = Normal::new(mean, 1.0).unwrap();
    Array2::from_shape_simple_fn((rows, cols), || n.sample(rng))
}

/// Largest absolute difference over both logits and softmax outputs.
fn deviation(a: &Network, b: &Network, x: ArrayView2<'_, f64>) -> f64 {
    let (ta, tb) = (forward(a, x).unwrap(), forward(b, x).unwrap());
    let logits = (&ta.logits - &tb.logits).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let probs = (&ta.probabilities - &tb.probabilities)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    logits.max(probs)
}

/// Random teacher no larger than 20-16-12-8.
fn random_teacher(rng: &mut ChaCha8Rng, activation: Activation) -> Network {
    let input = rng.random_range(2..=20);
    let mut arch = vec![input, rng.random_range(1..=16)];
    if rng.random_bool(0.5) {
        arch.push(rng.random_range(1..=12));
    }
    arch.push(rng.random_range(2..=8));
    init_random(&arch, activation, rng.random()).unwrap()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for t in 0..50 {
        let act = if t % 2 == 0 { Activation::Sigmoid } else { Activation::Relu };
        let teacher = random_teacher(&mut rng, act);
        let layers = teacher.hidden().len();
        let layer = rng.random_range(1..=layers);
        let width = teacher.hidden()[layer - 1].n_out() + rng.random_range(1..=10);
        let student = widen(&teacher, layer, width, 0.0, rng.random()).unwrap();
        let x = gaussian(100, teacher.input_dim(), 0.0, &mut rng);
        worst = worst.max(deviation(&teacher, &student, x.view()));
    }
    check(worst <= 1e-10, format!("max deviation {worst:.3e} (tol 1e-10) over 50 teachers"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut shapes_ok = true;
    for t in 0..50 {
        let act = if t % 2 == 0 { Activation::Relu } else { Activation::Sigmoid };
        let teacher = random_teacher(&mut rng, act);
        let after = rng.random_range(1..=teacher.hidden().len());
        let student = deepen(&teacher, after).unwrap();
        let mut expected = teacher.hidden_widths();
        expected.insert(after, expected[after - 1]);
        shapes_ok &= student.hidden_widths() == expected;
        if act == Activation::Relu {
            let x = gaussian(100, teacher.input_dim(), 0.0, &mut rng);
            worst = worst.max(deviation(&teacher, &student, x.view()));
        }
    }
    check(
        worst <= 1e-12 && shapes_ok,
        format!("relu max deviation {worst:.3e} (tol 1e-12); sigmoid shapes grow: {shapes_ok}"),
    )
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn joint_fd(arch: &[usize], lambda: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = init_random(arch, Activation::Sigmoid, seed).unwrap();
    let c = *arch.last().unwrap();
    let xs = gaussian(8, arch[0], 0.0, &mut rng);
    let xt = gaussian(8, arch[0], 0.8, &mut rng);
    let y: Vec<usize> = (0..8).map(|i| i % c).collect();
    let b = Batches {
        source: xs.view(),
        source_labels: &y,
        target: xt.view(),
        target_labels: &y,
    };
    let fs = net.features(xs.view()).unwrap();
    let ft = net.features(xt.view()).unwrap();
    let sigma = mmd::median_bandwidth(fs.view(), ft.view()).unwrap();
    let cfg = AdaptConfig {
        lambda_mmd: lambda,
        kernel: KernelChoice::Fixed(KernelSpec::rbf(sigma).unwrap()),
        ..Default::default()
    };
    let analytic: Vec<f64> = adapt::joint_grad(&net, &b, &cfg).unwrap().iter().copied().collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let at = |delta: f64| {
            let mut n = net.clone();
            *n.parameters_mut().nth(i).unwrap() += delta;
            adapt::joint_loss(&n, &b, &cfg).unwrap().total
        };
        worst = worst.max(rel_err(a, (at(h) - at(-h)) / (2.0 * h)));
    }
    worst
}

fn ae_fd(n_in: usize, hidden: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hp = SaeHyperParams::default();
    let ae = Autoencoder::random(n_in, hidden, &hp, seed);
    let x = gaussian(8, n_in, 0.5, &mut rng);
    let (_, g) = ae_loss_and_grad(&ae, x.view(), &hp).unwrap();
    let h = 1e-6;
    let loss = |ae: &Autoencoder| ae_loss_and_grad(ae, x.view(), &hp).unwrap().0.total();
    let mut worst = 0.0f64;
    for (which, grad) in [(0, &g.encoder), (1, &g.decoder)] {
        for (i, &a) in grad.weights.iter().chain(grad.bias.iter()).enumerate() {
            let at = |delta: f64| {
                let mut p = ae.clone();
                let layer = if which == 0 { &mut p.encoder } else { &mut p.decoder };
                let nw = layer.weights.len();
                if i < nw {
                    let cols = layer.weights.ncols();
                    layer.weights[[i / cols, i % cols]] += delta;
                } else {
                    layer.bias[i - nw] += delta;
                }
                loss(&p)
            };
            worst = worst.max(rel_err(a, (at(h) - at(-h)) / (2.0 * h)));
        }
    }
    worst
}

fn criterion_3() -> Outcome {
    let mut worst_joint = 0.0f64;
    for (k, arch) in [vec![8, 6, 5, 4], vec![6, 5, 3], vec![5, 4, 3, 2]].iter().enumerate() {
        for (j, lambda) in [0.0, 1.0, 10.0].into_iter().enumerate() {
            worst_joint = worst_joint.max(joint_fd(arch, lambda, 300 + (k * 3 + j) as u64));
        }
    }
    let worst_ae = ae_fd(8, 6, 310).max(ae_fd(6, 4, 311)).max(ae_fd(10, 6, 312));
    check(
        worst_joint <= 1e-4 && worst_ae <= 1e-4,
        format!("joint_grad rel err {worst_joint:.2e}, ae_loss_and_grad rel err {worst_ae:.2e} (tol 1e-4)"),
    )
}

fn brute_mmd2(xs: &Array2<f64>, xt: &Array2<f64>, k: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let rows = |m: &Array2<f64>| -> Vec<Vec<f64>> { m.rows().into_iter().map(|r| r.to_vec()).collect() };
    let (s, t) = (rows(xs), rows(xt));
    let mean = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut sum = 0.0;
        for p in a {
            for q in b {
                sum += k(p, q);
            }
        }
        sum / (a.len() * b.len()) as f64
    };
    (mean(&s, &s) + mean(&t, &t) - 2.0 * mean(&s, &t)).max(0.0)
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let a = gaussian(20, 3, 0.0, &mut rng);
    let b = gaussian(20, 3, 0.5, &mut rng);
    let rbf = KernelSpec::rbf(1.3).unwrap();
    let same = mmd::mmd2_biased(a.view(), a.view(), &rbf).unwrap();

    let oracle_rbf = brute_mmd2(&a, &b, |p, q| {
        let d2: f64 = p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum();
        (-d2 / (2.0 * 1.3 * 1.3)).exp()
    });
    let oracle_lin = brute_mmd2(&a, &b, |p, q| p.iter().zip(q).map(|(u, v)| u * v).sum());
    let gap_rbf = (mmd::mmd2_biased(a.view(), b.view(), &rbf).unwrap() - oracle_rbf).abs();
    let gap_lin = (mmd::mmd2_biased(a.view(), b.view(), &KernelSpec::Linear).unwrap() - oracle_lin).abs();

    let xs = gaussian(200, 1, 0.0, &mut rng);
    let xt = gaussian(200, 1, 3.0, &mut rng);
    let k = KernelSpec::rbf(mmd::median_bandwidth(xs.view(), xt.view()).unwrap()).unwrap();
    let observed = mmd::mmd2_biased(xs.view(), xt.view(), &k).unwrap();
    let null = mmd::permutation_null(xs.view(), xt.view(), &k, 200, 405).unwrap();
    let q99 = mmd::quantile(&null, 0.99);
    check(
        same <= 1e-12 && gap_rbf <= 1e-12 && gap_lin <= 1e-12 && observed > q99,
        format!(
            "identical {same:.1e}; oracle gap rbf {gap_rbf:.1e} linear {gap_lin:.1e}; \
             N(0,1) vs N(3,1) {observed:.4} > null q99 {q99:.5}"
        ),
    )
}

fn cli(args: &[&str]) -> String {
    let cli = Cli::try_parse_from(std::iter::once("quickadapt").chain(args.iter().copied()))
        .unwrap_or_else(|e| panic!("bad arguments {args:?}: {e}"));
    let mut out = Vec::new();
    run(&cli, &mut out).unwrap_or_else(|e| panic!("{args:?} failed: {e}"));
    String::from_utf8(out).unwrap()
}

const PIPELINE_SEED: &str = "1";

/// synth → train-teacher → transform → adapt (--ablate) → evaluate, all under `dir`.
fn pipeline(dir: &Path) {
    let p = |rel: &str| dir.join(rel).to_str().unwrap().to_owned();
    std::fs::write(
        dir.join("teacher_config.json"),
        r#"{"teacher":{"hidden":[32,16,8],"sae":{"lambda_decay":0.001}}}"#,
    )
    .unwrap();
    cli(&[
        "synth", "--out-dir", &p("data"), "--seed", PIPELINE_SEED, "--classes", "4", "--shift", "0.5",
        "--n-source", "200", "--n-target", "40",
    ]);
    cli(&[
        "train-teacher", "--config", &p("teacher_config.json"), "--data", &p("data/source.csv"),
        "--out-dir", &p("teacher"), "--seed", PIPELINE_SEED,
    ]);
    cli(&[
        "transform", "--teacher", &p("teacher/teacher.json"), "--student-hidden", "32,24,16,8",
        "--out-dir", &p("student"), "--seed", PIPELINE_SEED,
    ]);
    cli(&[
        "adapt", "--student", &p("student/student.json"), "--source", &p("data/source.csv"),
        "--target", &p("data/target_train.csv"), "--test", &p("data/target_test.csv"),
        "--normalization", &p("teacher/normalization.json"), "--out-dir", &p("adapt"),
        "--iterations", "50", "--ablate", "--seed", PIPELINE_SEED,
    ]);
    cli(&[
        "evaluate", "--model", &p("adapt/adapted.json"), "--data", &p("data/target_test.csv"),
        "--normalization", &p("teacher/normalization.json"), "--cv", "5", "--out", &p("metrics.json"),
    ]);
}

fn criterion_5() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    pipeline(dir.path());
    let elapsed = start.elapsed();
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("adapt/adapt_report.json")).unwrap()).unwrap();
    let acc = |block: &str| report[block]["target_test"]["accuracy"].as_f64().unwrap();
    let (without, with) = (acc("without_da"), acc("with_da"));
    let mmd0 = report["with_da"]["initial_loss"]["mmd_term"].as_f64().unwrap();
    let mmd_end = report["with_da"]["final_loss"]["mmd_term"].as_f64().unwrap();
    let iterations = report["with_da"]["iterations"].as_u64().unwrap();
    check(
        with >= without && with >= 0.90 && mmd_end <= 0.5 * mmd0 && iterations == 50 && elapsed < Duration::from_secs(60),
        format!(
            "target-test accuracy without D.A. {without:.4}, with D.A. {with:.4} (≥ 0.90); \
             class-wise MMD² {mmd0:.4} -> {mmd_end:.4} ({:.1}%); pipeline {:.1} s",
            100.0 * mmd_end / mmd0,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_6() -> Outcome {
    let series = TimeSeries {
        values: (0..121_000).map(|i| (i as f64 * 0.01).sin()).collect(),
        sample_rate: 12_000.0,
        label: 0,
    };
    let n = segment(&series, 100).unwrap().len();
    check(n == 1210, format!("121000 points / L=100 -> {n} samples"))
}

/// Median per-iteration fine-tuning time with `n` samples in each domain.
fn per_iteration_time(net: &Network, n: usize, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let xs = gaussian(n, net.input_dim(), 0.0, &mut rng);
    let xt = gaussian(n, net.input_dim(), 0.5, &mut rng);
    let y: Vec<usize> = (0..n).map(|i| i % net.n_classes()).collect();
    let b = Batches {
        source: xs.view(),
        source_labels: &y,
        target: xt.view(),
        target_labels: &y,
    };
    let cfg = AdaptConfig {
        iterations: 6,
        lr_rule: LrRule::Fixed,
        eta0: 0.01,
        kernel: KernelChoice::Fixed(KernelSpec::rbf(4.0).unwrap()),
        ..Default::default()
    };
    let mut times: Vec<f64> = (0..trials)
        .map(|_| {
            let start = Instant::now();
            adapt::fine_tune(net, &b, &cfg).unwrap();
            start.elapsed().as_secs_f64() / cfg.iterations as f64
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[trials / 2]
}

fn criterion_7() -> Outcome {
    // Narrow h-level features and 8 classes keep the quadratic MMD term small
    // next to the dense layers, whose cost is linear in n.
    let net = init_random(&[256, 256, 128, 8, 8], Activation::Sigmoid, 7).unwrap();
    per_iteration_time(&net, 400, 2); // warm-up
    let small = per_iteration_time(&net, 400, 5);
    let large = per_iteration_time(&net, 800, 5);
    let ratio = large / small;
    check(
        (1.5..=3.0).contains(&ratio),
        format!(
            "per-iteration {:.2} ms at n=400, {:.2} ms at n=800: ratio {ratio:.2} (want [1.5, 3.0])",
            small * 1e3,
            large * 1e3
        ),
    )
}

fn criterion_8() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let files = [
        "teacher/teacher.json",
        "student/student.json",
        "student/plan.json",
        "adapt/adapted.json",
        "adapt/adapt_report.json",
        "adapt/adapt_report.csv",
        "metrics.json",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap())
        .collect();
    check(
        differing.is_empty(),
        format!("{} artifacts compared, differing: {differing:?}", files.len()),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("widen preserves function", criterion_1, 10),
        ("deepen preserves function (relu)", criterion_2, 5),
        ("gradients match finite differences", criterion_3, 30),
        ("MMD estimator", criterion_4, 20),
        ("end-to-end synthetic adaptation", criterion_5, 60),
        ("segmentation arithmetic", criterion_6, 1),
        ("iteration cost scales linearly", criterion_7, 60),
        ("exact reproducibility", criterion_8, 120),
    ];
    let mut failed = 0;
    for (i, (name, f, budget)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(d) if secs > budget as f64 => Err(format!("{d}; over the {budget} s budget")),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {} [{tag}] {name}: {detail} ({secs:.2} s)", i + 1);
        failed += usize::from(outcome.is_err());
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
    println!("all 8 criteria passed");
}
