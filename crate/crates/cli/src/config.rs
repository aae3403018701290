//! JSON run configurations. Every field has a default, so `{}` is a valid file.

use std::path::{Path, PathBuf};

use quickadapt::adapt::AdaptConfig;
use quickadapt::data::SynthSpec;
use quickadapt::sae::TeacherConfig;
use quickadapt::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// How dataset CSVs are turned into samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataOptions {
    /// When set, each CSV row is one long recording cut into windows of this length;
    /// otherwise each row is already one sample.
    pub segment_length: Option<usize>,
    /// JSON file mapping label names to class ids.
    pub class_map: Option<PathBuf>,
    pub sample_rate: f64,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions {
            segment_length: None,
            class_map: None,
            sample_rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRunConfig {
    pub seed: u64,
    pub spec: SynthSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherRunConfig {
    pub seed: u64,
    pub teacher: TeacherConfig,
    pub data: DataOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformRunConfig {
    pub seed: u64,
    /// Student hidden widths; ignored when a plan file is given.
    pub student_hidden: Vec<usize>,
    pub noise_eps: f64,
    /// Random inputs used to report the teacher/student output deviation.
    pub probes: usize,
}

impl Default for TransformRunConfig {
    fn default() -> Self {
        TransformRunConfig {
            seed: 0,
            student_hidden: Vec::new(),
            noise_eps: 0.0,
            probes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptRunConfig {
    pub adapt: AdaptConfig,
    /// Fraction of the labeled target set used for adaptation (stratified).
    pub target_fraction: f64,
    /// Also run with `lambda_mmd = 0` and report both.
    pub ablate: bool,
    pub data: DataOptions,
}

impl Default for AdaptRunConfig {
    fn default() -> Self {
        AdaptRunConfig {
            adapt: AdaptConfig::default(),
            target_fraction: 1.0,
            ablate: false,
            data: DataOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateRunConfig {
    /// Number of folds for cross-validated accuracy.
    pub cv: Option<usize>,
    pub seed: u64,
    pub data: DataOptions,
}

/// Reads a config file, or the defaults when no path is given.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
