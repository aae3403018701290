//! JSON model files.
//!
//! ```json
//! {"input_dim":4,
//!  "layers":[{"rows":3,"cols":4,"activation":"sigmoid","weights":[..12..],"bias":[..3..]}],
//!  "classifier":{"rows":2,"cols":3,"activation":"identity","weights":[..6..],"bias":[..2..]}}
//! ```
//!
//! Weights are stored row-major. Floats are written in shortest round-trip
//! form, so a save/load cycle is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Activation, Layer, Network};
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    rows: usize,
    cols: usize,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    input_dim: usize,
    layers: Vec<LayerFile>,
    classifier: LayerFile,
}

impl From<&Layer> for LayerFile {
    fn from(layer: &Layer) -> Self {
        LayerFile {
            rows: layer.n_out(),
            cols: layer.n_in(),
            activation: layer.activation,
            weights: layer.weights.iter().copied().collect(),
            bias: layer.bias.to_vec(),
        }
    }
}

impl LayerFile {
    fn into_layer(self, name: &str) -> Result<Layer> {
        if self.weights.len() != self.rows * self.cols {
            return Err(Error::Validation(format!(
                "{name}: {} weights for a {}x{} matrix",
                self.weights.len(),
                self.rows,
                self.cols
            )));
        }
        if self.bias.len() != self.rows {
            return Err(Error::Validation(format!(
                "{name}: bias length {} differs from row count {}",
                self.bias.len(),
                self.rows
            )));
        }
        let weights = Array2::from_shape_vec((self.rows, self.cols), self.weights)
            .map_err(|e| Error::Validation(format!("{name}: {e}")))?;
        Layer::new(weights, Array1::from(self.bias), self.activation).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("{name}: {msg}")),
            other => other,
        })
    }
}

pub(crate) fn to_json(net: &Network) -> String {
    let file = ModelFile {
        input_dim: net.input_dim(),
        layers: net.hidden().iter().map(LayerFile::from).collect(),
        classifier: net.classifier().into(),
    };
    let mut s = serde_json::to_string(&file).expect("model serializes");
    s.push('\n');
    s
}

pub(crate) fn from_json(text: &str) -> Result<Network> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let hidden = file
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.into_layer(&format!("layer {}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    let classifier = file.classifier.into_layer("classifier")?;
    Network::new(file.input_dim, hidden, classifier)
}

/// serde_json reports 1-based line/column; convert to a 0-based byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), to_json(net).as_bytes())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
