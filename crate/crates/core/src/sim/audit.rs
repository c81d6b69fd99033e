//! Invariant audit of a trained operator on random joint samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::network::CbfOperator;
use crate::training::sample_terms;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub samples: usize,
    pub seed: u64,
    /// Central-difference step for the state-gradient check.
    pub fd_step: f64,
    /// Allowed relative error of `∇ₓh` against central differences.
    pub gradient_tol: f64,
    /// Allowed `h − c̲` and `c̲ − c` excess.
    pub containment_tol: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            seed: 0,
            fd_step: 1e-6,
            gradient_tol: 1e-6,
            containment_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub samples: usize,
    /// Samples with `h > c̲` or `c̲ > c` beyond tolerance.
    pub containment_violations: usize,
    pub max_containment_excess: f64,
    pub mean_residual_sq: f64,
    pub mean_violation_sq: f64,
    /// Fraction of samples with `I_γ < 0`.
    pub infeasible_fraction: f64,
    pub max_gradient_error: f64,
    pub passed: bool,
}

/// Samples the checkpoint's state domain and environment distribution and
/// reports containment, PDE residual and gradient consistency.
pub fn check_operator(operator: &CbfOperator, config: &CheckConfig) -> Result<CheckReport> {
    let n = operator.state_dim();
    let tree = &operator.environment.tree;
    let model = &operator.model;
    let beta = model.config.beta;
    let domain = operator
        .system
        .state_domain()
        .concat(&operator.environment.distribution.as_box());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = CheckReport {
        samples: config.samples,
        containment_violations: 0,
        max_containment_excess: f64::NEG_INFINITY,
        mean_residual_sq: 0.0,
        mean_violation_sq: 0.0,
        infeasible_fraction: 0.0,
        max_gradient_error: 0.0,
        passed: false,
    };
    let mut infeasible = 0usize;
    for _ in 0..config.samples {
        let xi = domain.sample(&mut rng);
        let (x, e) = xi.split_at(n);
        let c = tree.eval(x, e)?;
        let c_lower = tree.eval_smooth_lower(x, e, beta)?;
        let (h, grad) = model.h_value_and_gradient_x(tree, x, e)?;
        let excess = (h - c_lower).max(c_lower - c);
        report.max_containment_excess = report.max_containment_excess.max(excess);
        if excess > config.containment_tol {
            report.containment_violations += 1;
        }
        let terms = sample_terms(model, &operator.system, tree, x, e)?;
        report.mean_residual_sq += terms.residual().powi(2);
        report.mean_violation_sq += terms.violation().powi(2);
        infeasible += usize::from(terms.condition < 0.0);
        let mut probe = x.to_vec();
        for i in 0..n {
            let base = probe[i];
            probe[i] = base + config.fd_step;
            let up = model.h_forward(tree, &probe, e)?;
            probe[i] = base - config.fd_step;
            let down = model.h_forward(tree, &probe, e)?;
            probe[i] = base;
            let fd = (up - down) / (2.0 * config.fd_step);
            let err = (grad[i] - fd).abs() / fd.abs().max(1.0);
            report.max_gradient_error = report.max_gradient_error.max(err);
        }
    }
    let count = config.samples.max(1) as f64;
    report.mean_residual_sq /= count;
    report.mean_violation_sq /= count;
    report.infeasible_fraction = infeasible as f64 / count;
    report.passed = report.containment_violations == 0
        && report.max_gradient_error <= config.gradient_tol
        && report.mean_residual_sq.is_finite();
    Ok(report)
}
