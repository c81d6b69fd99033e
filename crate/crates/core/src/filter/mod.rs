//! CBF-QP safety filter and the reference controllers it corrects.

mod controllers;
mod qp;

pub use controllers::{pd_controller, unicycle_controller, ReferenceController};
pub use qp::{solve_halfspace_box_qp, FilterProblem, QpSolution, QpStatus};

use crate::environment::ConstraintTree;
use crate::error::{check_len, Result};
use crate::network::CbfModel;
use crate::systems::ControlAffineSystem;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub u: Vec<f64>,
    pub status: QpStatus,
    pub h: f64,
    pub grad_h: Vec<f64>,
    pub problem: FilterProblem,
}

impl FilterOutput {
    /// True when the QP was infeasible and the Hamiltonian maximizer was used.
    pub fn used_fallback(&self) -> bool {
        self.status == QpStatus::Infeasible
    }
}

/// Assembles `a = gᵀ∇h`, `b = −∇h·f − γh` from the model at `(x, e)` and
/// returns the input closest to `u_ref` satisfying `aᵀu ≥ b` inside the input
/// box. If no such input exists the Hamiltonian-maximizing vertex is returned
/// with status [`QpStatus::Infeasible`].
pub fn safety_filter(
    model: &CbfModel,
    system: &ControlAffineSystem,
    tree: &ConstraintTree,
    x: &[f64],
    e: &[f64],
    u_ref: &[f64],
) -> Result<FilterOutput> {
    let (n, m) = (system.state_dim(), system.input_dim());
    check_len("state", n, x.len())?;
    check_len("reference input", m, u_ref.len())?;
    let (h, grad_h) = model.h_value_and_gradient_x(tree, x, e)?;
    let f = system.drift(x);
    let g = system.actuation(x);
    let a: Vec<f64> = (0..m)
        .map(|j| (0..n).map(|i| grad_h[i] * g[i * m + j]).sum())
        .collect();
    let lf: f64 = grad_h.iter().zip(&f).map(|(p, fi)| p * fi).sum();
    let problem = FilterProblem {
        u_ref: u_ref.to_vec(),
        a,
        b: -lf - model.config.gamma * h,
        lower: system.inputs().lower.clone(),
        upper: system.inputs().upper.clone(),
    };
    let solution = solve_halfspace_box_qp(&problem)?;
    let u = match solution.status {
        QpStatus::Optimal => solution.u,
        QpStatus::Infeasible => system.hamiltonian_max(x, &grad_h)?.u_star,
    };
    Ok(FilterOutput {
        u,
        status: solution.status,
        h,
        grad_h,
        problem,
    })
}
