//! Per-sample terms of the HJ residual and the CBF-condition penalty.

use crate::environment::ConstraintTree;
use crate::error::Result;
use crate::network::CbfModel;
use crate::systems::{ControlAffineSystem, HamiltonianMax};

/// Everything the two loss terms need at one joint state.
#[derive(Debug, Clone)]
pub struct PdeTerms {
    pub c_lower: f64,
    pub delta: f64,
    /// `h = c̲ − δ`.
    pub h: f64,
    pub grad_h: Vec<f64>,
    pub hamiltonian: HamiltonianMax,
    /// `I_γ = max_u ∇hᵀ(f + g u) + γh`.
    pub condition: f64,
    /// `f(x) + g(x) u*`.
    pub closed_loop_rate: Vec<f64>,
}

impl PdeTerms {
    /// Whether `min{c̲ − h, I_γ}` picks its first branch (ties included).
    pub fn residual_selects_delta(&self) -> bool {
        self.delta <= self.condition
    }

    /// `min{c̲ − h, I_γ}`; the first branch is `δ` exactly.
    pub fn residual(&self) -> f64 {
        if self.residual_selects_delta() {
            self.delta
        } else {
            self.condition
        }
    }

    /// `(−I_γ)₊`.
    pub fn violation(&self) -> f64 {
        (-self.condition).max(0.0)
    }
}

pub(crate) fn pde_terms(
    system: &ControlAffineSystem,
    x: &[f64],
    gamma: f64,
    c_lower: f64,
    grad_c_x: &[f64],
    delta: f64,
    grad_delta_x: &[f64],
) -> PdeTerms {
    let grad_h: Vec<f64> = grad_c_x
        .iter()
        .zip(grad_delta_x)
        .map(|(c, d)| c - d)
        .collect();
    let h = c_lower - delta;
    let hamiltonian = system.hamiltonian_max_unchecked(x, &grad_h);
    let closed_loop_rate = system.rate(x, &hamiltonian.u_star);
    PdeTerms {
        c_lower,
        delta,
        h,
        condition: hamiltonian.value + gamma * h,
        grad_h,
        hamiltonian,
        closed_loop_rate,
    }
}

/// Evaluates the loss terms of `model` at `(x, e)` with the model's `γ`, `β`.
pub fn sample_terms(
    model: &CbfModel,
    system: &ControlAffineSystem,
    tree: &ConstraintTree,
    x: &[f64],
    e: &[f64],
) -> Result<PdeTerms> {
    let n = system.state_dim();
    crate::error::check_len("state", n, x.len())?;
    let xi: Vec<f64> = x.iter().chain(e).copied().collect();
    let (c_lower, dc) = tree.smooth_lower_with_gradient(x, e, model.config.beta)?;
    let (delta, dd) = model.delta_with_gradient(&xi, n)?;
    Ok(pde_terms(system, x, model.config.gamma, c_lower, &dc[..n], delta, &dd))
}

/// Steady-state HJ residual `min{c̲ − h_θ, max_u ∇h_θᵀ(f + gu) + γh_θ}`.
pub fn residual_hj(
    model: &CbfModel,
    system: &ControlAffineSystem,
    tree: &ConstraintTree,
    x: &[f64],
    e: &[f64],
) -> Result<f64> {
    Ok(sample_terms(model, system, tree, x, e)?.residual())
}

/// CBF-condition violation `(−I_γ(h_θ))₊`.
pub fn cbf_violation(
    model: &CbfModel,
    system: &ControlAffineSystem,
    tree: &ConstraintTree,
    x: &[f64],
    e: &[f64],
) -> Result<f64> {
    Ok(sample_terms(model, system, tree, x, e)?.violation())
}

/// `mean(residual²) + λ · mean(violation²)` over `(x, e)` pairs.
pub fn combined_loss(
    model: &CbfModel,
    system: &ControlAffineSystem,
    tree: &ConstraintTree,
    batch: &[(&[f64], &[f64])],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(crate::error::Error::Config("loss batch is empty".into()));
    }
    let (mut hj, mut cbf) = (0.0, 0.0);
    for (x, e) in batch {
        let t = sample_terms(model, system, tree, x, e)?;
        hj += t.residual().powi(2);
        cbf += t.violation().powi(2);
    }
    let count = batch.len() as f64;
    Ok(hj / count + model.config.lambda * cbf / count)
}
