//! Versioned JSON checkpoints for trained operators.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{CbfModel, InputNormalizer, Layer, MlpParams, ModelConfig};
use crate::environment::Environment;
use crate::error::{Error, Result};
use crate::systems::{ControlAffineSystem, SystemSpec};

pub const CHECKPOINT_FORMAT: &str = "cbf-kit-checkpoint/v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    /// Row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    model: ModelConfig,
    normalizer: InputNormalizer,
    system: SystemSpec,
    environment: Environment,
    layers: Vec<LayerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<serde_json::Value>,
}

/// A trained model bundled with the system and environment it was trained on.
#[derive(Debug, Clone)]
pub struct CbfOperator {
    pub model: CbfModel,
    pub system: ControlAffineSystem,
    pub environment: Environment,
    /// Free-form record of the training run (config echo, step count).
    pub training: Option<serde_json::Value>,
}

impl CbfOperator {
    pub fn new(
        model: CbfModel,
        system: ControlAffineSystem,
        environment: Environment,
    ) -> Result<Self> {
        let n = system.state_dim();
        environment.validate(n)?;
        if model.config.input_dim != n + environment.env_dim() {
            return Err(Error::Shape {
                what: "model input (n + n_e)",
                expected: n + environment.env_dim(),
                actual: model.config.input_dim,
            });
        }
        Ok(Self {
            model,
            system,
            environment,
            training: None,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.system.state_dim()
    }

    pub fn env_dim(&self) -> usize {
        self.environment.env_dim()
    }

    pub fn h(&self, x: &[f64], e: &[f64]) -> Result<f64> {
        self.model.h_forward(&self.environment.tree, x, e)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            model: self.model.config.clone(),
            normalizer: self.model.normalizer.clone(),
            system: self.system.spec(),
            environment: self.environment.clone(),
            layers: self
                .model
                .params
                .layers
                .iter()
                .map(|l| LayerRecord {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
            training: self.training.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format `{}` (expected `{CHECKPOINT_FORMAT}`)",
                file.format
            )));
        }
        let layers = file
            .layers
            .into_iter()
            .map(|r| {
                let weights = Array2::from_shape_vec((r.rows, r.cols), r.weights)
                    .map_err(|e| Error::Config(format!("layer weights: {e}")))?;
                Ok(Layer {
                    weights,
                    bias: Array1::from_vec(r.bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = CbfModel::new(file.model, file.normalizer, MlpParams { layers })?;
        let mut op = Self::new(model, file.system.build()?, file.environment)?;
        op.training = file.training;
        Ok(op)
    }

    /// Writes to a temporary sibling and renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
