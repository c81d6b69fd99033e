use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::dataset::JointDataset;
use crate::environment::ConstraintTree;
use crate::error::{Error, Result};
use crate::network::{loss_param_gradient, CbfModel, LossSpec};
use crate::systems::ControlAffineSystem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// When set, the step size follows a cosine from `learning_rate` down to
    /// this value over the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_learning_rate: Option<f64>,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Steps between checkpoint callbacks; 0 disables them.
    #[serde(default)]
    pub checkpoint_interval: u64,
    /// Hard cap on optimizer steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
}

fn default_batch_size() -> usize {
    4096
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            final_learning_rate: None,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            seed: 0,
            checkpoint_interval: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let Some(lr) = self.final_learning_rate {
            if !(lr >= 0.0) {
                return Err(Error::Config("final_learning_rate must be >= 0".into()));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Total optimizer steps for a dataset of `len` joint samples.
    pub fn total_steps(&self, len: usize) -> u64 {
        let per_epoch = len.div_ceil(self.batch_size) as u64;
        let total = per_epoch * self.epochs as u64;
        self.max_steps.map_or(total, |cap| total.min(cap))
    }

    fn learning_rate_at(&self, step: u64, total: u64) -> f64 {
        match self.final_learning_rate {
            Some(end) if total > 1 => {
                let progress = step as f64 / (total - 1) as f64;
                end + 0.5 * (self.learning_rate - end) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            _ => self.learning_rate,
        }
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_hj: f64,
    pub loss_cbf: f64,
    pub wall_ms: u64,
}

/// Hooks called from the training loop.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &LossRecord) {}

    /// Called every `checkpoint_interval` steps, at the end of training, and
    /// with the last finite model when training aborts.
    fn on_checkpoint(&mut self, _model: &CbfModel, _step: u64) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CbfModel,
    pub history: Vec<LossRecord>,
    pub adam: AdamState,
}

/// Minibatch ADAM over shuffled joint samples, starting from `initial`.
pub fn train(
    config: &TrainConfig,
    dataset: &JointDataset,
    system: &ControlAffineSystem,
    tree: &ConstraintTree,
    initial: CbfModel,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = system.state_dim();
    let dim = n + dataset.env_dim();
    if dataset.state_dim() != n || initial.config.input_dim != dim {
        return Err(Error::Shape {
            what: "training joint state",
            expected: initial.config.input_dim,
            actual: dim,
        });
    }
    if dataset.len() > u32::MAX as usize {
        return Err(Error::Config("dataset too large to index".into()));
    }
    let spec = LossSpec {
        gamma: initial.config.gamma,
        lambda: initial.config.lambda,
        beta: initial.config.beta,
    };
    let total = config.total_steps(dataset.len());
    let mut model = initial;
    let mut adam = AdamState::new(&model.params);
    let mut history = Vec::with_capacity(total as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut order: Vec<u32> = (0..dataset.len() as u32).collect();
    let mut batch = Array2::zeros((config.batch_size.min(dataset.len()), dim));
    let start = Instant::now();
    let mut step = 0u64;

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if step >= total {
                break 'epochs;
            }
            if batch.nrows() != chunk.len() {
                batch = Array2::zeros((chunk.len(), dim));
            }
            for (mut row, &idx) in batch.outer_iter_mut().zip(chunk) {
                dataset.fill_row(idx as usize, row.as_slice_mut().expect("standard layout"));
            }
            let lg = match loss_param_gradient(
                &model,
                batch.view(),
                &spec,
                system,
                tree,
            ) {
                Ok(lg) if lg.loss.is_finite() => lg,
                Ok(_) => {
                    observer.on_checkpoint(&model, step)?;
                    return Err(Error::Config(format!("non-finite loss at step {step}")));
                }
                Err(e) => {
                    observer.on_checkpoint(&model, step)?;
                    return Err(e);
                }
            };
            let record = LossRecord {
                step,
                epoch,
                loss_total: lg.loss,
                loss_hj: lg.loss_hj,
                loss_cbf: lg.loss_cbf,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            observer.on_step(&record);
            history.push(record);
            let lr = config.learning_rate_at(step, total);
            adam.apply(&mut model.params, &lg.grad, &config.adam(lr));
            step += 1;
            if config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0 {
                observer.on_checkpoint(&model, step)?;
            }
        }
    }
    if step > 0 {
        observer.on_checkpoint(&model, step)?;
    }
    Ok(TrainOutcome {
        model,
        history,
        adam,
    })
}

/// CSV with columns `step,epoch,loss_total,loss_hj,loss_cbf,wall_ms`.
pub fn write_history_csv<W: Write>(mut out: W, history: &[LossRecord]) -> Result<()> {
    writeln!(out, "step,epoch,loss_total,loss_hj,loss_cbf,wall_ms")?;
    for r in history {
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{}",
            r.step, r.epoch, r.loss_total, r.loss_hj, r.loss_cbf, r.wall_ms
        )?;
    }
    Ok(())
}

impl LossRecord {
    pub fn write_csv_file(path: &Path, history: &[LossRecord]) -> Result<()> {
        let mut buf = Vec::new();
        write_history_csv(&mut buf, history)?;
        crate::network::checkpoint::write_atomic(path, &buf)
    }
}
