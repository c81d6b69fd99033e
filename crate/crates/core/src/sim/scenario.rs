use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::filter::ReferenceController;
use crate::network::CbfOperator;
use crate::systems::{BuiltinSystem, ControlAffineSystem};

/// Scripted motion of one environment slot.
///
/// With `knots` (pairs `[t, value]`, strictly increasing in `t`) the slot is
/// piecewise-linear through them and constant outside. Otherwise it moves
/// linearly from its initial value at `rate` per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotMotion {
    pub slot: usize,
    #[serde(default)]
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub knots: Vec<[f64; 2]>,
}

impl SlotMotion {
    fn value(&self, initial: f64, t: f64) -> f64 {
        let Some(first) = self.knots.first() else {
            return initial + self.rate * t;
        };
        if t <= first[0] {
            return first[1];
        }
        for w in self.knots.windows(2) {
            let ([t0, v0], [t1, v1]) = (w[0], w[1]);
            if t <= t1 {
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
            }
        }
        self.knots[self.knots.len() - 1][1]
    }

    /// Times at which the slot's value can change slope.
    fn breakpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.knots.iter().map(|k| k[0])
    }
}

/// A closed-loop run: checkpoint, scripted environment, start and target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Builtin system name; must match the checkpoint.
    pub system: String,
    /// Checkpoint path, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Informational preset name of the environment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environment: Option<String>,
    #[serde(default)]
    pub initial_env: Vec<f64>,
    #[serde(default)]
    pub motion: Vec<SlotMotion>,
    pub start: Vec<f64>,
    pub target: Vec<f64>,
    /// Defaults to PD for the double integrator and the heading controller
    /// otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ReferenceController>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_reach_tolerance")]
    pub reach_tolerance: f64,
    #[serde(default)]
    pub stop_on_reach: bool,
    /// Half-widths of the uniform start perturbation used by
    /// [`Scenario::perturbed`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_perturbation: Option<Vec<f64>>,
}

fn default_dt() -> f64 {
    0.01
}
fn default_reach_tolerance() -> f64 {
    0.3
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let scenario: Scenario = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Reads a scenario and resolves its checkpoint path against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut scenario = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let (Some(ckpt), Some(dir)) = (&scenario.checkpoint, path.parent()) {
            if ckpt.is_relative() {
                scenario.checkpoint = Some(dir.join(ckpt));
            }
        }
        Ok(scenario)
    }

    pub fn load_operator(&self) -> Result<CbfOperator> {
        let path = self
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("scenario has no checkpoint".into()))?;
        CbfOperator::load(path)
    }

    /// Checks that need nothing but the scenario itself.
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1 step".into()));
        }
        if !(self.reach_tolerance > 0.0) {
            return Err(Error::Config("reach_tolerance must be positive".into()));
        }
        if let Some(c) = &self.controller {
            c.validate()?;
        }
        for m in &self.motion {
            if m.slot >= self.initial_env.len() {
                return Err(Error::SlotOutOfRange {
                    slot: m.slot,
                    n_env: self.initial_env.len(),
                });
            }
            if m.knots.windows(2).any(|w| !(w[1][0] > w[0][0])) {
                return Err(Error::Config(format!(
                    "motion knots for slot {} must have increasing times",
                    m.slot
                )));
            }
        }
        if let Some(w) = &self.start_perturbation {
            check_len("start perturbation", self.start.len(), w.len())?;
        }
        let all = self
            .start
            .iter()
            .chain(&self.target)
            .chain(&self.initial_env);
        for v in all {
            if !v.is_finite() {
                return Err(Error::NonFinite { what: "scenario" });
            }
        }
        Ok(())
    }

    /// Checks against the operator the scenario will run with.
    pub fn validate_against(&self, operator: &CbfOperator) -> Result<()> {
        self.validate()?;
        if self.system != operator.system.name() {
            return Err(Error::Config(format!(
                "scenario system `{}` does not match checkpoint system `{}`",
                self.system,
                operator.system.name()
            )));
        }
        check_len("start state", operator.state_dim(), self.start.len())?;
        check_len("initial environment", operator.env_dim(), self.initial_env.len())?;
        let controller = self.controller_for(&operator.system);
        check_len("target", controller.target_dim(), self.target.len())?;
        let t_end = (self.horizon - 1) as f64 * self.dt;
        let mut times = vec![0.0, t_end];
        for m in &self.motion {
            times.extend(m.breakpoints().filter(|&t| t > 0.0 && t < t_end));
        }
        for slot in operator.environment.tree.radius_slots() {
            for &t in &times {
                let r = self.env_at(t)[slot];
                if !(r > 0.0) {
                    return Err(Error::Config(format!(
                        "radius slot {slot} reaches {r} at t = {t}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn controller_for(&self, system: &ControlAffineSystem) -> ReferenceController {
        self.controller.clone().unwrap_or(match system.kind() {
            BuiltinSystem::DoubleIntegrator => ReferenceController::Pd { kp: 1.0, kd: 2.0 },
            _ => ReferenceController::Unicycle {
                k_omega: 2.0,
                k_v: 1.0,
            },
        })
    }

    /// Environment parameters at time `t`.
    pub fn env_at(&self, t: f64) -> Vec<f64> {
        let mut e = self.initial_env.clone();
        for m in &self.motion {
            e[m.slot] = m.value(self.initial_env[m.slot], t);
        }
        e
    }

    /// Copy with the start drawn uniformly within `start_perturbation`;
    /// `index` selects an independent stream of the scenario seed.
    pub fn perturbed(&self, index: u64) -> Scenario {
        let mut out = self.clone();
        if let Some(widths) = &self.start_perturbation {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(index + 1);
            for (x, &w) in out.start.iter_mut().zip(widths) {
                if w > 0.0 {
                    *x += rng.random_range(-w..=w);
                }
            }
        }
        out
    }
}
