//! Closed-loop simulation, grid evaluation and verification oracles.

mod audit;
mod grid;
mod oracle;
mod scenario;

pub use audit::{check_operator, CheckConfig, CheckReport};
pub use grid::{eval_grid, GridAxis, GridReport, GridSpec};
pub use oracle::{analytic_double_integrator_kernel, grid_viability_kernel, KernelGrid, OracleConfig};
pub use scenario::{Scenario, SlotMotion};

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::filter::{safety_filter, QpStatus, ReferenceController};
use crate::network::CbfOperator;
use crate::systems::{BuiltinSystem, ControlAffineSystem};

/// One simulation step: the state at `t` and what was applied from it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub u_ref: Vec<f64>,
    pub u_safe: Vec<f64>,
    pub status: QpStatus,
    pub h: f64,
    /// Exact constraint `c(x, e)`.
    pub c: f64,
    pub e: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    Horizon,
    Reached,
    /// Integration failed; the records up to the failure are kept.
    Diverged { step: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    /// First step whose state is within the reach tolerance of the target.
    pub reached_at: Option<usize>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn min_constraint(&self) -> f64 {
        self.records.iter().map(|r| r.c).fold(f64::INFINITY, f64::min)
    }

    pub fn fallback_steps(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.status == QpStatus::Infeasible)
            .count()
    }

    pub fn fallback_fraction(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.fallback_steps() as f64 / self.records.len() as f64
        }
    }

    pub fn final_state(&self) -> Option<&[f64]> {
        self.records.last().map(|r| r.x.as_slice())
    }

    /// CSV with 17 significant digits per float.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        fn names(prefix: &str, len: usize) -> impl Iterator<Item = String> + '_ {
            (0..len).map(move |i| format!("{prefix}{i}"))
        }
        let Some(first) = self.records.first() else {
            writeln!(out, "step,t")?;
            return Ok(());
        };
        let mut header = vec!["step".to_string(), "t".to_string()];
        header.extend(names("x", first.x.len()));
        header.extend(names("u_ref", first.u_ref.len()));
        header.extend(names("u", first.u_safe.len()));
        header.extend(["status".into(), "h".into(), "c".into()]);
        header.extend(names("e", first.e.len()));
        writeln!(out, "{}", header.join(","))?;
        for r in &self.records {
            let mut row = vec![r.step.to_string(), fmt_f64(r.t)];
            row.extend(r.x.iter().map(|v| fmt_f64(*v)));
            row.extend(r.u_ref.iter().map(|v| fmt_f64(*v)));
            row.extend(r.u_safe.iter().map(|v| fmt_f64(*v)));
            row.push(r.status.as_str().to_string());
            row.extend([fmt_f64(r.h), fmt_f64(r.c)]);
            row.extend(r.e.iter().map(|v| fmt_f64(*v)));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::network::write_atomic(path, &buf)
    }
}

/// `{:.16e}`: 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Reference input for `system` from `controller`. Dubins cars take only the
/// turn-rate part of the unicycle controller.
pub fn reference_input(
    system: &ControlAffineSystem,
    controller: &ReferenceController,
    x: &[f64],
    target: &[f64],
) -> Result<Vec<f64>> {
    match (system.kind(), controller) {
        (BuiltinSystem::DoubleIntegrator, ReferenceController::Pd { .. })
        | (BuiltinSystem::Unicycle, ReferenceController::Unicycle { .. }) => {
            controller.compute(x, target)
        }
        (BuiltinSystem::DubinsCar { .. }, ReferenceController::Unicycle { .. }) => {
            Ok(vec![controller.compute(x, target)?[1]])
        }
        (kind, c) => Err(Error::Config(format!(
            "controller {c:?} does not drive system {}",
            kind.label()
        ))),
    }
}

/// Distance from `x` to the target in the controller's coordinates.
fn target_distance(x: &[f64], target: &[f64]) -> f64 {
    x.iter()
        .zip(target)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Runs the filtered closed loop. The environment is re-evaluated from the
/// motion script at every step and handed to the filter as-is.
pub fn simulate(scenario: &Scenario, operator: &CbfOperator) -> Result<Trajectory> {
    scenario.validate_against(operator)?;
    let system = &operator.system;
    let tree = &operator.environment.tree;
    let controller = scenario.controller_for(system);
    let mut x = scenario.start.clone();
    let mut records = Vec::with_capacity(scenario.horizon);
    let mut reached_at = None;
    let mut termination = Termination::Horizon;
    for step in 0..scenario.horizon {
        let t = step as f64 * scenario.dt;
        let e = scenario.env_at(t);
        if reached_at.is_none() && target_distance(&x, &scenario.target) <= scenario.reach_tolerance {
            reached_at = Some(step);
            if scenario.stop_on_reach {
                termination = Termination::Reached;
                break;
            }
        }
        let u_ref = reference_input(system, &controller, &x, &scenario.target)?;
        let filtered = safety_filter(&operator.model, system, tree, &x, &e, &u_ref)?;
        let c = tree.eval(&x, &e)?;
        let next = system.rk4_step(&x, &filtered.u, scenario.dt);
        records.push(StepRecord {
            step,
            t,
            x: x.clone(),
            u_ref,
            u_safe: filtered.u,
            status: filtered.status,
            h: filtered.h,
            c,
            e,
        });
        match next {
            Ok(n) => x = n,
            Err(err) => {
                termination = Termination::Diverged {
                    step,
                    reason: err.to_string(),
                };
                break;
            }
        }
    }
    Ok(Trajectory {
        records,
        reached_at,
        termination,
    })
}
