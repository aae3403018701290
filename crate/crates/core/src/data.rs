//! Dataset construction: segmentation, min-max scaling, fold splits,
//! stratified subsampling, CSV ingestion and a synthetic domain-shift generator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One recorded signal (or one pre-cut sample) with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    /// Hz; informational only.
    pub sample_rate: f64,
    pub label: usize,
}

/// Per-feature `(min, max)` fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
    pub normalization: Option<Normalization>,
}

impl TrainingSet {
    pub fn new(x: Array2<f64>, y: Vec<usize>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", x.nrows(), y.len())));
        }
        Ok(TrainingSet {
            x,
            y,
            normalization: None,
        })
    }

    /// Stacks equal-length series as rows.
    pub fn from_series(series: &[TimeSeries]) -> Result<Self> {
        let Some(first) = series.first() else {
            return Err(Error::Data("no samples".into()));
        };
        let d = first.values.len();
        if let Some((i, s)) = series.iter().enumerate().find(|(_, s)| s.values.len() != d) {
            return Err(Error::Shape(format!(
                "sample {i} has {} values, expected {d}",
                s.values.len()
            )));
        }
        let flat: Vec<f64> = series.iter().flat_map(|s| s.values.iter().copied()).collect();
        let x = Array2::from_shape_vec((series.len(), d), flat).expect("lengths checked");
        TrainingSet::new(x, series.iter().map(|s| s.label).collect())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> TrainingSet {
        TrainingSet {
            x: self.x.select(Axis(0), rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            normalization: self.normalization.clone(),
        }
    }

    /// Sample count per class `0..n_classes`.
    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &c in &self.y {
            if c < n_classes {
                counts[c] += 1;
            }
        }
        counts
    }
}

/// Source data plus labeled target train/test splits sharing one feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub source: TrainingSet,
    pub target_train: TrainingSet,
    pub target_test: TrainingSet,
    pub n_classes: usize,
}

/// Non-overlapping consecutive windows of `len` points; the remainder is dropped.
pub fn segment(series: &TimeSeries, len: usize) -> Result<Vec<TimeSeries>> {
    if len == 0 {
        return Err(Error::Config("segment length must be at least 1".into()));
    }
    Ok(series
        .values
        .chunks_exact(len)
        .map(|chunk| TimeSeries {
            values: chunk.to_vec(),
            sample_rate: series.sample_rate,
            label: series.label,
        })
        .collect())
}

/// Fits per-feature min-max scaling on `ts` and applies it.
pub fn minmax_normalize(ts: &TrainingSet) -> Result<TrainingSet> {
    if ts.x.nrows() == 0 {
        return Err(Error::Data("cannot normalize an empty set".into()));
    }
    let min: Vec<f64> = ts
        .x
        .axis_iter(Axis(1))
        .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let max: Vec<f64> = ts
        .x
        .axis_iter(Axis(1))
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    apply_normalization(ts, &Normalization { min, max })
}

/// `(x − min)/(max − min)` per feature, unclipped; constant features map to 0.
pub fn apply_normalization(ts: &TrainingSet, params: &Normalization) -> Result<TrainingSet> {
    if ts.x.nrows() == 0 {
        return Err(Error::Data("cannot normalize an empty set".into()));
    }
    if params.min.len() != ts.dim() || params.max.len() != ts.dim() {
        return Err(Error::Shape(format!(
            "normalization has {} features, data has {}",
            params.min.len(),
            ts.dim()
        )));
    }
    if let Some(j) = (0..ts.dim()).find(|&j| !(params.max[j] >= params.min[j])) {
        return Err(Error::Data(format!("feature {j}: max below min")));
    }
    let mut x = ts.x.clone();
    for (j, mut col) in x.axis_iter_mut(Axis(1)).enumerate() {
        let (lo, hi) = (params.min[j], params.max[j]);
        let span = hi - lo;
        if span > 0.0 {
            col.mapv_inplace(|v| (v - lo) / span);
        } else {
            col.fill(0.0);
        }
    }
    Ok(TrainingSet {
        x,
        y: ts.y.clone(),
        normalization: Some(params.clone()),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded permutation cut into `k` near-equal test folds; the first `n % k`
/// folds get one extra index. Index lists are sorted.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::Data(format!("{n} samples cannot fill {k} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut test = perm[start..start + size].to_vec();
        test.sort_unstable();
        let mut in_test = vec![false; n];
        test.iter().for_each(|&i| in_test[i] = true);
        let train = (0..n).filter(|&i| !in_test[i]).collect();
        folds.push(Fold { train, test });
        start += size;
    }
    Ok(folds)
}

/// Stratified sampling without replacement of `⌈fraction·n_c⌉` rows per class.
/// Selected rows keep their original order.
pub fn subsample_labeled(ts: &TrainingSet, fraction: f64, seed: u64) -> Result<TrainingSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let n_classes = ts.y.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in ts.y.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    let mut empty = Vec::new();
    for (c, rows) in by_class.iter_mut().enumerate() {
        let take = (fraction * rows.len() as f64).ceil() as usize;
        if take == 0 {
            empty.push(c);
            continue;
        }
        rows.shuffle(&mut rng);
        keep.extend_from_slice(&rows[..take]);
    }
    if !empty.is_empty() {
        return Err(Error::Coverage {
            domain: "labeled subsample".into(),
            missing: empty,
        });
    }
    keep.sort_unstable();
    Ok(ts.select(&keep))
}

/// Class name → id, e.g. `{"N":0,"IR":1,"B":2,"OR":3}`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassMap(pub BTreeMap<String, usize>);

impl ClassMap {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: e.column().saturating_sub(1),
            message: e.to_string(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.0.values().max().map_or(0, |m| m + 1)
    }

    fn resolve(&self, label: &str) -> Option<usize> {
        self.0.get(label).copied().or_else(|| {
            label
                .parse::<usize>()
                .ok()
                .filter(|id| self.0.values().any(|v| v == id))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvSchema {
    /// Without a map, labels must be non-negative integers.
    pub class_map: Option<ClassMap>,
    pub sample_rate: f64,
}

/// Reads `label,v0,v1,...` rows; each row becomes one [`TimeSeries`].
///
/// Rows may differ in length (long recordings are segmented later).
pub fn load_timeseries_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Vec<TimeSeries>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_timeseries_csv(&text, schema)
}

pub fn parse_timeseries_csv(text: &str, schema: &CsvSchema) -> Result<Vec<TimeSeries>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::ParseLine {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let mut fields = record.iter();
        let label_text = fields.next().unwrap_or("");
        let label = match &schema.class_map {
            Some(map) => map
                .resolve(label_text)
                .ok_or_else(|| Error::Data(format!("line {line}: unknown label `{label_text}`")))?,
            None => label_text.parse::<usize>().map_err(|_| Error::Data(format!(
                "line {line}: label `{label_text}` is not a class id"
            )))?,
        };
        let values = fields
            .enumerate()
            .map(|(i, f)| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::ParseLine {
                        line,
                        message: format!("value {i} `{f}` is not a finite number"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::ParseLine {
                line,
                message: "row has no values".into(),
            });
        }
        out.push(TimeSeries {
            values,
            sample_rate: schema.sample_rate,
            label,
        });
    }
    Ok(out)
}

/// One sample per row under a `label,v0,..` header.
pub fn samples_to_csv(ts: &TrainingSet) -> String {
    let mut out = String::from("label");
    for j in 0..ts.dim() {
        write!(out, ",v{j}").expect("writing to a String");
    }
    out.push('\n');
    for (row, &label) in ts.x.rows().into_iter().zip(&ts.y) {
        write!(out, "{label}").expect("writing to a String");
        for v in row {
            write!(out, ",{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

/// Parameters of [`synth_domains`]. Counts are per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub n_source: usize,
    /// Labeled target training samples.
    pub n_target: usize,
    pub n_target_test: usize,
    /// Operating-condition change: target amplitude ×(1+shift), frequency ×(1+0.2·shift).
    pub shift: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Phases are drawn uniformly from `[−phase_jitter, phase_jitter]` radians.
    pub phase_jitter: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 4,
            dim: 64,
            n_source: 200,
            n_target: 40,
            n_target_test: 200,
            shift: 0.5,
            noise: 0.1,
            phase_jitter: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("synthetic data needs at least 2 features".into()));
        }
        if self.n_source == 0 || self.n_target == 0 || self.n_target_test == 0 {
            return Err(Error::Config("every split needs at least one sample per class".into()));
        }
        if !(self.shift > -1.0 && self.shift.is_finite()) {
            return Err(Error::Config(format!("shift must exceed -1, got {}", self.shift)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        if !(self.phase_jitter >= 0.0 && self.phase_jitter <= PI) {
            return Err(Error::Config("phase_jitter must lie in [0, π]".into()));
        }
        Ok(())
    }
}

/// Cycles per window and second-harmonic weight for class `c`.
fn class_signature(c: usize) -> (f64, f64) {
    (1.5 + 1.25 * c as f64, if c.is_multiple_of(2) { 0.2 } else { 0.6 })
}

fn synth_split(
    spec: &SynthSpec,
    per_class: usize,
    shift: f64,
    rng: &mut ChaCha8Rng,
) -> TrainingSet {
    let d = spec.dim;
    let n = per_class * spec.n_classes;
    let phase = Uniform::new_inclusive(-spec.phase_jitter, spec.phase_jitter).expect("valid range");
    let jitter = Uniform::new(0.9, 1.1).expect("valid range");
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite std");
    let mut x = Array2::zeros((n, d));
    let mut y = Vec::with_capacity(n);
    for c in 0..spec.n_classes {
        let (cycles, harmonic) = class_signature(c);
        let freq = cycles * (1.0 + 0.2 * shift) / d as f64;
        for i in 0..per_class {
            let r = c * per_class + i;
            let amp = (1.0 + shift) * rng.sample(jitter);
            let phi = rng.sample(phase);
            for t in 0..d {
                let theta = 2.0 * PI * freq * t as f64 + phi;
                let clean = amp * (theta.sin() + harmonic * (2.0 * theta).sin());
                x[[r, t]] = clean + noise.sample(rng);
            }
            y.push(c);
        }
    }
    TrainingSet {
        x,
        y,
        normalization: None,
    }
}

/// Balanced source/target splits of class-dependent sinusoid windows.
///
/// Classes differ in base frequency and harmonic mix; each sample has a
/// jittered phase, ±10% amplitude jitter and additive noise. The target domain scales
/// amplitude by `1 + shift` and frequency by `1 + 0.2·shift`. Values are raw
/// (not normalized).
pub fn synth_domains(spec: &SynthSpec, seed: u64) -> Result<DomainPair> {
    spec.validate()?;
    let mut streams = (0..3u64).map(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s);
        rng
    });
    let mut src_rng = streams.next().expect("three streams");
    let mut trn_rng = streams.next().expect("three streams");
    let mut tst_rng = streams.next().expect("three streams");
    Ok(DomainPair {
        source: synth_split(spec, spec.n_source, 0.0, &mut src_rng),
        target_train: synth_split(spec, spec.n_target, spec.shift, &mut trn_rng),
        target_test: synth_split(spec, spec.n_target_test, spec.shift, &mut tst_rng),
        n_classes: spec.n_classes,
    })
}
