//! Run configuration for `train`: system, environment, dataset, model and
//! optimizer settings in one JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::BoxBounds;
use crate::environment::{ConstraintTree, EnvDistribution, Environment};
use crate::error::{check_len, Error, Result};
use crate::network::{init_params, CbfModel, CbfOperator, InputNormalizer, ModelConfig};
use crate::systems::{ControlAffineSystem, SystemSpec};
use crate::training::{
    build_dataset, train, BoundarySampling, JointDataset, LossRecord, Pairing, TrainConfig, TrainObserver,
    TrainOutcome,
};

/// Either a named preset or an inline tree plus distribution.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<ConstraintTree>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<EnvDistribution>,
    /// Pins the environment to one parameter vector (replaces the
    /// distribution).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed: Option<Vec<f64>>,
}

impl EnvironmentSpec {
    pub fn preset(name: &str) -> Self {
        Self {
            preset: Some(name.to_string()),
            ..Self::default()
        }
    }

    pub fn build(&self) -> Result<Environment> {
        let mut env = match (&self.preset, &self.tree, &self.distribution) {
            (Some(name), None, None) => Environment::preset(name)?,
            (None, Some(tree), distribution) => Environment {
                tree: tree.clone(),
                distribution: distribution.clone().unwrap_or(EnvDistribution { ranges: vec![] }),
            },
            _ => {
                return Err(Error::Config(
                    "environment: give either `preset` or `tree` (+ `distribution`)".into(),
                ))
            }
        };
        if let Some(e) = &self.fixed {
            check_len("fixed environment", env.env_dim(), e.len())?;
            env.distribution = EnvDistribution::fixed(e);
            env.distribution.validate()?;
        }
        Ok(env)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Number of sampled environments `M`.
    pub environments: usize,
    /// States per environment (or in the shared pool) `N`.
    pub states: usize,
    /// State sampling box; defaults to the system's state domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_box: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub pairing: Pairing,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<BoundarySampling>,
}

/// Architecture and loss weights; the input width follows from the system
/// and environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOptions {
    #[serde(default = "default_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_width")]
    pub hidden_width: usize,
    #[serde(default = "default_one")]
    pub gamma: f64,
    #[serde(default = "default_one")]
    pub lambda: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_layers() -> usize {
    4
}
fn default_width() -> usize {
    50
}
fn default_one() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    crate::environment::DEFAULT_BETA
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            hidden_layers: default_layers(),
            hidden_width: default_width(),
            gamma: 1.0,
            lambda: 1.0,
            beta: default_beta(),
        }
    }
}

impl ModelOptions {
    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            hidden_layers: self.hidden_layers,
            hidden_width: self.hidden_width,
            gamma: self.gamma,
            lambda: self.lambda,
            beta: self.beta,
            ..ModelConfig::new(input_dim)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSpec,
    pub environment: EnvironmentSpec,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelOptions,
    pub train: TrainConfig,
}

/// Everything needed to start training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub system: ControlAffineSystem,
    pub environment: Environment,
    pub dataset: JointDataset,
    pub model: CbfModel,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn state_box(&self, system: &ControlAffineSystem) -> Result<BoxBounds> {
        match &self.dataset.state_box {
            Some(pairs) => BoxBounds::from_pairs(pairs),
            None => Ok(system.state_domain().clone()),
        }
    }

    /// Samples the dataset and initializes the network. `seed` overrides
    /// `train.seed`; the dataset and the initial weights use independent
    /// streams derived from it.
    pub fn prepare(&self, seed: Option<u64>) -> Result<Prepared> {
        let system = self.system.build()?;
        let environment = self.environment.build()?;
        environment.validate(system.state_dim())?;
        let mut train = self.train.clone();
        if let Some(seed) = seed {
            train.seed = seed;
        }
        train.validate()?;
        let state_box = self.state_box(&system)?;
        if state_box.dim() != system.state_dim() {
            return Err(Error::Shape {
                what: "dataset state_box",
                expected: system.state_dim(),
                actual: state_box.dim(),
            });
        }
        if self.dataset.environments == 0 {
            return Err(Error::Config("dataset.environments must be at least 1".into()));
        }
        let mut dataset = build_dataset(
            &environment.distribution,
            &state_box,
            self.dataset.environments,
            self.dataset.states,
            train.seed,
            self.dataset.pairing,
        )?;
        if let Some(plan) = &self.dataset.boundary {
            plan.apply(&mut dataset, &environment.tree, &state_box, train.seed)?;
        }
        let input_dim = system.state_dim() + environment.env_dim();
        let config = ModelConfig {
            periodic_inputs: system.kind().periodic_dims(),
            ..self.model.model_config(input_dim)
        };
        let normalizer = InputNormalizer::from_box(&state_box.concat(&environment.distribution.as_box()));
        let params = init_params(&config, train.seed.wrapping_add(0x9e37_79b9))?;
        let model = CbfModel::new(config, normalizer, params)?;
        Ok(Prepared {
            system,
            environment,
            dataset,
            model,
            train,
        })
    }
}

/// Writes the operator to `path` at every checkpoint callback.
pub struct CheckpointWriter {
    pub path: PathBuf,
    pub system: ControlAffineSystem,
    pub environment: Environment,
    pub record: serde_json::Value,
    pub written: Vec<u64>,
    pub progress: Option<Box<dyn FnMut(&LossRecord)>>,
}

impl CheckpointWriter {
    pub fn new(path: PathBuf, prepared: &Prepared, record: serde_json::Value) -> Self {
        Self {
            path,
            system: prepared.system.clone(),
            environment: prepared.environment.clone(),
            record,
            written: Vec::new(),
            progress: None,
        }
    }

    pub fn operator(&self, model: &CbfModel, step: u64) -> Result<CbfOperator> {
        let mut op = CbfOperator::new(model.clone(), self.system.clone(), self.environment.clone())?;
        let mut record = self.record.clone();
        if let Some(obj) = record.as_object_mut() {
            obj.insert("step".into(), step.into());
        }
        op.training = Some(record);
        Ok(op)
    }
}

impl TrainObserver for CheckpointWriter {
    fn on_step(&mut self, record: &LossRecord) {
        if let Some(cb) = self.progress.as_mut() {
            cb(record);
        }
    }

    fn on_checkpoint(&mut self, model: &CbfModel, step: u64) -> Result<()> {
        self.operator(model, step)?.save(&self.path)?;
        self.written.push(step);
        Ok(())
    }
}

/// Trains from a prepared run, optionally starting from `resume` weights.
pub fn run_training(
    prepared: &Prepared,
    resume: Option<&CbfOperator>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let initial = match resume {
        Some(op) => {
            if op.system.spec() != prepared.system.spec() || op.environment != prepared.environment {
                return Err(Error::Config(
                    "resume checkpoint was trained on a different system or environment".into(),
                ));
            }
            if op.model.config.input_dim != prepared.model.config.input_dim
                || op.model.config.periodic_inputs != prepared.model.config.periodic_inputs
                || op.model.params.shapes() != prepared.model.params.shapes()
            {
                return Err(Error::Config(
                    "resume checkpoint architecture does not match the config".into(),
                ));
            }
            CbfModel {
                config: prepared.model.config.clone(),
                normalizer: op.model.normalizer.clone(),
                params: op.model.params.clone(),
            }
        }
        None => prepared.model.clone(),
    };
    train(
        &prepared.train,
        &prepared.dataset,
        &prepared.system,
        &prepared.environment.tree,
        initial,
        observer,
    )
}
