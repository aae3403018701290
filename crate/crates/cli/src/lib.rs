//! Command implementations behind the `quickadapt` binary.
//!
//! Each command loads and validates all inputs, computes its results, and only
//! then writes output files (atomically). A failing command leaves no partial
//! artifacts behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use quickadapt::adapt::{self, AdaptConfig, AdaptReport, Batches, JointLoss, KernelChoice, LrRule, Metrics};
use quickadapt::data::{self, ClassMap, CsvSchema, Normalization, TrainingSet};
use quickadapt::mmd::KernelSpec;
use quickadapt::net2net::{self, TransformPlan};
use quickadapt::nn::{load_model, save_model, write_atomic};
use quickadapt::sae::{self, ClassLoss};
use quickadapt::{Error, Network, Result};

pub mod config;

use config::{
    load_config, AdaptRunConfig, DataOptions, EvaluateRunConfig, SynthRunConfig, TeacherRunConfig,
    TransformRunConfig,
};

pub const SOURCE_CSV: &str = "source.csv";
pub const TARGET_TRAIN_CSV: &str = "target_train.csv";
pub const TARGET_TEST_CSV: &str = "target_test.csv";
pub const TEACHER_MODEL: &str = "teacher.json";
pub const TEACHER_LOSS_CSV: &str = "teacher_loss.csv";
pub const NORMALIZATION: &str = "normalization.json";
pub const STUDENT_MODEL: &str = "student.json";
pub const PLAN: &str = "plan.json";
pub const ADAPTED_MODEL: &str = "adapted.json";
pub const ADAPT_CSV: &str = "adapt_report.csv";
pub const ADAPT_BASELINE_CSV: &str = "adapt_report_without_da.csv";
pub const ADAPT_JSON: &str = "adapt_report.json";

#[derive(Debug, Parser)]
#[command(name = "quickadapt", version, about = "Teacher -> student -> domain adaptation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain stacked sparse autoencoders and fine-tune a teacher classifier.
    TrainTeacher(TrainTeacherArgs),
    /// Widen/deepen a teacher into a student without changing its function.
    Transform(TransformArgs),
    /// Fine-tune a student on source + labeled target data with class-wise MMD.
    Adapt(AdaptArgs),
    /// Accuracy, per-class accuracy and confusion matrix of a model on a dataset.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic source/target dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Treat each row as a long recording and cut it into windows of this length.
    #[arg(long)]
    pub segment: Option<usize>,
    /// JSON map from label names to class ids.
    #[arg(long)]
    pub class_map: Option<PathBuf>,
}

impl DataArgs {
    fn apply(&self, opts: &mut DataOptions) {
        if let Some(l) = self.segment {
            opts.segment_length = Some(l);
        }
        if let Some(p) = &self.class_map {
            opts.class_map = Some(p.clone());
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainTeacherArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Source-domain CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Hidden widths, e.g. `70,30,20`.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ae_epochs: Option<usize>,
    #[arg(long)]
    pub ft_epochs: Option<usize>,
    #[arg(long)]
    pub lambda_decay: Option<f64>,
    #[command(flatten)]
    pub data_args: DataArgs,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub teacher: PathBuf,
    /// Student hidden widths, e.g. `70,50,30,20`.
    #[arg(long, value_delimiter = ',', conflicts_with = "plan")]
    pub student_hidden: Option<Vec<usize>>,
    /// Replay a previously emitted plan instead of planning from widths.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise_eps: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub student: PathBuf,
    /// Labeled source CSV.
    #[arg(long)]
    pub source: PathBuf,
    /// Labeled target CSV used for adaptation.
    #[arg(long)]
    pub target: PathBuf,
    /// Held-out target CSV for reporting accuracy.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Min-max parameters applied to every dataset.
    #[arg(long)]
    pub normalization: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long = "lambda")]
    pub lambda_mmd: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub eta0: Option<f64>,
    /// `bold_driver` or `fixed`.
    #[arg(long, value_parser = parse_lr_rule)]
    pub lr_rule: Option<LrRule>,
    /// Fixed RBF bandwidth instead of the median heuristic.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub target_fraction: Option<f64>,
    /// Also fine-tune without the MMD term and report both results.
    #[arg(long)]
    pub ablate: bool,
    #[command(flatten)]
    pub data_args: DataArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub normalization: Option<PathBuf>,
    /// Report accuracy over this many folds as mean ± SD.
    #[arg(long)]
    pub cv: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data_args: DataArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Source samples per class.
    #[arg(long)]
    pub n_source: Option<usize>,
    /// Labeled target samples per class.
    #[arg(long)]
    pub n_target: Option<usize>,
    /// Held-out target samples per class.
    #[arg(long)]
    pub n_target_test: Option<usize>,
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

fn parse_lr_rule(s: &str) -> std::result::Result<LrRule, String> {
    match s {
        "bold_driver" | "bold-driver" => Ok(LrRule::BoldDriver),
        "fixed" => Ok(LrRule::Fixed),
        other => Err(format!("unknown learning-rate rule `{other}`")),
    }
}

/// Process exit status for an error: 2 config/data, 3 plan, 4 coverage, 5 shape, 1 otherwise.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Data(_)
        | Error::Domain(_)
        | Error::Parse { .. }
        | Error::ParseLine { .. }
        | Error::Validation(_)
        | Error::Io { .. } => 2,
        Error::Plan { .. } | Error::InvalidPlan(_) => 3,
        Error::Coverage { .. } => 4,
        Error::Shape(_) => 5,
        _ => 1,
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::TrainTeacher(a) => train_teacher(a, out),
        Command::Transform(a) => transform(a, out),
        Command::Adapt(a) => adapt_cmd(a, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Synth(a) => synth(a, out),
    }
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<()> {
    out.write_fmt(text)
        .and_then(|()| out.write_all(b"\n"))
        .map_err(|e| Error::Io {
            path: "<stdout>".into(),
            source: e,
        })
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!("input file not found: {}", path.display())))
    }
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("plain data serializes");
    bytes.push(b'\n');
    bytes
}

fn load_class_map(opts: &DataOptions) -> Result<Option<ClassMap>> {
    match &opts.class_map {
        None => Ok(None),
        Some(p) => {
            require_file(p)?;
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            ClassMap::from_json(&text).map(Some)
        }
    }
}

/// Loads a labeled CSV into one sample per row (segmenting when configured).
pub fn load_dataset(path: &Path, opts: &DataOptions) -> Result<TrainingSet> {
    require_file(path)?;
    let schema = CsvSchema {
        class_map: load_class_map(opts)?,
        sample_rate: opts.sample_rate,
    };
    let rows = data::load_timeseries_csv(path, &schema)?;
    let samples = match opts.segment_length {
        None => rows,
        Some(len) => {
            let mut all = Vec::new();
            for r in &rows {
                all.extend(data::segment(r, len)?);
            }
            all
        }
    };
    if samples.is_empty() {
        return Err(Error::Data(format!("{} contains no samples", path.display())));
    }
    TrainingSet::from_series(&samples).map_err(|e| match e {
        Error::Shape(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn load_normalization(path: &Path) -> Result<Normalization> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn normalize_with(ts: TrainingSet, params: Option<&Normalization>) -> Result<TrainingSet> {
    match params {
        Some(p) => data::apply_normalization(&ts, p),
        None => Ok(ts),
    }
}

fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg: SynthRunConfig = load_config(a.config.as_deref())?;
    let spec = &mut cfg.spec;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let spec_overrides = [
        (a.classes, &mut spec.n_classes),
        (a.dim, &mut spec.dim),
        (a.n_source, &mut spec.n_source),
        (a.n_target, &mut spec.n_target),
        (a.n_target_test, &mut spec.n_target_test),
    ];
    for (flag, field) in spec_overrides {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if let Some(v) = a.shift {
        spec.shift = v;
    }
    if let Some(v) = a.noise {
        spec.noise = v;
    }
    let pair = data::synth_domains(&cfg.spec, cfg.seed)?;
    prepare_out_dir(&a.out_dir)?;
    for (name, set) in [
        (SOURCE_CSV, &pair.source),
        (TARGET_TRAIN_CSV, &pair.target_train),
        (TARGET_TEST_CSV, &pair.target_test),
    ] {
        write_atomic(&a.out_dir.join(name), data::samples_to_csv(set).as_bytes())?;
        say(out, format_args!("wrote {} ({} samples)", name, set.len()))?;
    }
    Ok(())
}

fn teacher_loss_csv(run: &sae::TeacherRun) -> String {
    let mut csv = String::from("stage,epoch,loss\n");
    for (i, ae) in run.autoencoders.iter().enumerate() {
        for (epoch, loss) in ae.losses.iter().enumerate() {
            csv.push_str(&format!("ae{},{epoch},{loss:?}\n", i + 1));
        }
    }
    for (epoch, loss) in run.finetune_losses.iter().enumerate() {
        csv.push_str(&format!("finetune,{epoch},{loss:?}\n"));
    }
    csv
}

fn train_teacher(a: &TrainTeacherArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg: TeacherRunConfig = load_config(a.config.as_deref())?;
    if let Some(h) = &a.hidden {
        cfg.teacher.hidden = h.clone();
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.ae_epochs {
        cfg.teacher.sae.epochs = v;
    }
    if let Some(v) = a.ft_epochs {
        cfg.teacher.ft_epochs = v;
    }
    if let Some(v) = a.lambda_decay {
        cfg.teacher.sae.lambda_decay = v;
    }
    a.data_args.apply(&mut cfg.data);
    cfg.teacher.sae.validate()?;

    let raw = load_dataset(&a.data, &cfg.data)?;
    let source = data::minmax_normalize(&raw)?;
    let run = sae::train_teacher(source.x.view(), &source.y, &cfg.teacher, cfg.seed)?;
    let metrics = adapt::evaluate(&run.network, source.x.view(), &source.y)?;
    let normalization = source.normalization.clone().expect("set by minmax_normalize");

    prepare_out_dir(&a.out_dir)?;
    save_model(&run.network, a.out_dir.join(TEACHER_MODEL))?;
    write_atomic(&a.out_dir.join(TEACHER_LOSS_CSV), teacher_loss_csv(&run).as_bytes())?;
    write_atomic(&a.out_dir.join(NORMALIZATION), &to_json_bytes(&normalization))?;
    let loss_name = match cfg.teacher.ft_loss {
        ClassLoss::Mse => "mse",
        ClassLoss::CrossEntropy => "cross-entropy",
    };
    say(
        out,
        format_args!(
            "teacher {:?}: final {loss_name} {:.6}, training accuracy {:.4}",
            run.network.arch(),
            run.finetune_losses.last().copied().unwrap_or(f64::NAN),
            metrics.accuracy
        ),
    )
}

fn transform(a: &TransformArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg: TransformRunConfig = load_config(a.config.as_deref())?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.noise_eps {
        cfg.noise_eps = v;
    }
    if let Some(h) = &a.student_hidden {
        cfg.student_hidden = h.clone();
    }
    if !(cfg.noise_eps >= 0.0 && cfg.noise_eps.is_finite()) {
        return Err(Error::Config("noise_eps must be non-negative".into()));
    }
    require_file(&a.teacher)?;
    let teacher = load_model(&a.teacher)?;
    let plan = match &a.plan {
        Some(p) => {
            require_file(p)?;
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            TransformPlan::from_json(&text)?
        }
        None => {
            if cfg.student_hidden.is_empty() {
                return Err(Error::Config("give --student-hidden or --plan".into()));
            }
            net2net::plan_transform(&teacher.hidden_widths(), &cfg.student_hidden)?
        }
    };
    let student = plan.apply(&teacher, cfg.noise_eps, cfg.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let probes = Array2::from_shape_simple_fn((cfg.probes.max(1), teacher.input_dim()), || rng.random::<f64>());
    let deviation = net2net::max_output_deviation(&teacher, &student, probes.view())?;

    prepare_out_dir(&a.out_dir)?;
    write_atomic(&a.out_dir.join(PLAN), plan.to_json().as_bytes())?;
    save_model(&student, a.out_dir.join(STUDENT_MODEL))?;
    say(
        out,
        format_args!(
            "student {:?} via {} step(s); max output deviation over {} probes: {:e}",
            student.arch(),
            plan.steps.len(),
            probes.nrows(),
            deviation
        ),
    )
}

/// Metrics block for one fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptSummary {
    pub lambda_mmd: f64,
    pub kernel: KernelSpec,
    pub iterations: usize,
    pub initial_loss: JointLoss,
    pub final_loss: JointLoss,
    /// Metrics on the labeled target data used for adaptation.
    pub target_train: Option<Metrics>,
    pub target_test: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct AblationSummary {
    without_da: AdaptSummary,
    with_da: AdaptSummary,
}

fn summarize(report: &AdaptReport, net: &Network, test: Option<&TrainingSet>) -> Result<AdaptSummary> {
    Ok(AdaptSummary {
        lambda_mmd: report.lambda_mmd,
        kernel: report.kernel,
        iterations: report.records.len(),
        initial_loss: report.initial,
        final_loss: report.final_loss(),
        target_train: report.final_metrics.clone(),
        target_test: test.map(|t| adapt::evaluate(net, t.x.view(), &t.y)).transpose()?,
    })
}

fn adapt_cmd(a: &AdaptArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg: AdaptRunConfig = load_config(a.config.as_deref())?;
    let ac = &mut cfg.adapt;
    if let Some(v) = a.lambda_mmd {
        ac.lambda_mmd = v;
    }
    if let Some(v) = a.iterations {
        ac.iterations = v;
    }
    if let Some(v) = a.eta0 {
        ac.eta0 = v;
    }
    if let Some(v) = a.lr_rule {
        ac.lr_rule = v;
    }
    if let Some(v) = a.bandwidth {
        ac.kernel = KernelChoice::Fixed(KernelSpec::rbf(v)?);
    }
    if let Some(v) = a.seed {
        ac.seed = v;
    }
    if let Some(v) = a.target_fraction {
        cfg.target_fraction = v;
    }
    cfg.ablate |= a.ablate;
    a.data_args.apply(&mut cfg.data);
    cfg.adapt.validate()?;

    require_file(&a.student)?;
    let student = load_model(&a.student)?;
    let norm = a.normalization.as_deref().map(load_normalization).transpose()?;
    let source = normalize_with(load_dataset(&a.source, &cfg.data)?, norm.as_ref())?;
    let target = normalize_with(load_dataset(&a.target, &cfg.data)?, norm.as_ref())?;
    let target = data::subsample_labeled(&target, cfg.target_fraction, cfg.adapt.seed)?;
    let test = a
        .test
        .as_deref()
        .map(|p| normalize_with(load_dataset(p, &cfg.data)?, norm.as_ref()))
        .transpose()?;
    for (name, set) in [("source", &source), ("target", &target)]
        .into_iter()
        .chain(test.as_ref().map(|t| ("test", t)))
    {
        if set.dim() != student.input_dim() {
            return Err(Error::Shape(format!(
                "{name} data has {} features, model expects {}",
                set.dim(),
                student.input_dim()
            )));
        }
    }
    let batches = Batches {
        source: source.x.view(),
        source_labels: &source.y,
        target: target.x.view(),
        target_labels: &target.y,
    };

    let (adapted, report) = adapt::fine_tune(&student, &batches, &cfg.adapt)?;
    let with_da = summarize(&report, &adapted, test.as_ref())?;
    let baseline = if cfg.ablate {
        let no_mmd = AdaptConfig {
            lambda_mmd: 0.0,
            ..cfg.adapt.clone()
        };
        let (net, rep) = adapt::fine_tune(&student, &batches, &no_mmd)?;
        Some((summarize(&rep, &net, test.as_ref())?, rep))
    } else {
        None
    };

    prepare_out_dir(&a.out_dir)?;
    save_model(&adapted, a.out_dir.join(ADAPTED_MODEL))?;
    write_atomic(&a.out_dir.join(ADAPT_CSV), report.to_csv().as_bytes())?;
    let json = match &baseline {
        Some((without, rep)) => {
            write_atomic(&a.out_dir.join(ADAPT_BASELINE_CSV), rep.to_csv().as_bytes())?;
            to_json_bytes(&AblationSummary {
                without_da: without.clone(),
                with_da: with_da.clone(),
            })
        }
        None => to_json_bytes(&with_da),
    };
    write_atomic(&a.out_dir.join(ADAPT_JSON), &json)?;

    let accuracy = |s: &AdaptSummary| {
        s.target_test
            .as_ref()
            .or(s.target_train.as_ref())
            .map_or(f64::NAN, |m| m.accuracy)
    };
    let split = if test.is_some() { "target-test" } else { "target-train" };
    if let Some((without, _)) = &baseline {
        say(out, format_args!("without D.A.: {split} accuracy {:.4}", accuracy(without)))?;
    }
    say(
        out,
        format_args!(
            "with D.A. (lambda {}): {split} accuracy {:.4}; loss {:.6} -> {:.6}",
            with_da.lambda_mmd,
            accuracy(&with_da),
            with_da.initial_loss.total,
            with_da.final_loss.total
        ),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossValidation {
    pub folds: usize,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluateOutput {
    #[serde(flatten)]
    pub metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cv: Option<CrossValidation>,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg: EvaluateRunConfig = load_config(a.config.as_deref())?;
    if let Some(k) = a.cv {
        cfg.cv = Some(k);
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    a.data_args.apply(&mut cfg.data);
    if let Some(k) = cfg.cv {
        if k < 2 {
            return Err(Error::Config(format!("--cv needs at least 2 folds, got {k}")));
        }
    }
    require_file(&a.model)?;
    let model = load_model(&a.model)?;
    let norm = a.normalization.as_deref().map(load_normalization).transpose()?;
    let raw = load_dataset(&a.data, &cfg.data)?;
    if raw.dim() != model.input_dim() {
        return Err(Error::Shape(format!(
            "data has {} features, model expects {}",
            raw.dim(),
            model.input_dim()
        )));
    }
    let set = normalize_with(raw, norm.as_ref())?;
    let metrics = adapt::evaluate(&model, set.x.view(), &set.y)?;
    let cv = match cfg.cv {
        None => None,
        Some(k) => {
            let pred = model.predict(set.x.view())?;
            let fold_accuracies: Vec<f64> = data::kfold_split(set.len(), k, cfg.seed)?
                .iter()
                .map(|f| {
                    let hits = f.test.iter().filter(|&&i| pred[i] == set.y[i]).count();
                    hits as f64 / f.test.len() as f64
                })
                .collect();
            let (mean, std) = mean_std(&fold_accuracies);
            Some(CrossValidation {
                folds: k,
                fold_accuracies,
                mean,
                std,
            })
        }
    };
    let output = EvaluateOutput { metrics, cv };
    let json = to_json_bytes(&output);
    if let Some(path) = &a.out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            prepare_out_dir(dir)?;
        }
        write_atomic(path, &json)?;
    }
    out.write_all(&json).map_err(|e| Error::Io {
        path: "<stdout>".into(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_deviation_examples() {
        assert_eq!(mean_std(&[0.9; 5]), (0.9, 0.0));
        let (m, sd) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn exit_code_map() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Data("x".into())), 2);
        assert_eq!(
            exit_code(&Error::Plan {
                position: 1,
                reason: "x".into()
            }),
            3
        );
        assert_eq!(
            exit_code(&Error::Coverage {
                domain: "target".into(),
                missing: vec![1]
            }),
            4
        );
        assert_eq!(exit_code(&Error::Shape("x".into())), 5);
        assert_eq!(exit_code(&Error::Numeric { term: "x".into() }), 1);
    }

    #[test]
    fn learning_rate_rule_names() {
        assert_eq!(parse_lr_rule("fixed"), Ok(LrRule::Fixed));
        assert_eq!(parse_lr_rule("bold_driver"), Ok(LrRule::BoldDriver));
        assert!(parse_lr_rule("adam").is_err());
    }
}
