//! Acceptance suite. Runs without the libtest harness so the per-criterion
//! summary is always printed; exits non-zero if any criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,4` restricts the run to the listed criteria.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cbf_kit::environment::lse;
use cbf_kit::filter::solve_halfspace_box_qp;
use cbf_kit::network::{init_params, loss_param_gradient, LossSpec};
use cbf_kit::training::sample_terms;
use cbf_kit::{
    BoxBounds, CbfModel, ConstraintTree, ControlAffineSystem, EnvDistribution, Environment,
    FilterProblem, InputNormalizer, ModelConfig, QpStatus,
};

mod training_runs;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "gradient fidelity", gradient_fidelity),
        (2, "containment", containment),
        (3, "lse sandwich", lse_sandwich),
        (4, "hamiltonian and qp oracles", hamiltonian_and_qp),
        (5, "double-integrator kernel", training_runs::double_integrator_kernel),
        (6, "operator adaptation", training_runs::operator_adaptation),
        (7, "closed-loop safety", training_runs::closed_loop_safety),
        (8, "oracle self-consistency", training_runs::oracle_consistency),
    ];
    let mut failed = 0;
    let mut lines = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run)
            .unwrap_or_else(|_| Outcome::new(false, "panicked"));
        let line = format!(
            "criterion {id} ({name}): {} [{:.1}s] {}",
            if outcome.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
        println!("{line}");
        lines.push(line);
        failed += usize::from(!outcome.passed);
    }
    println!("\nacceptance summary");
    for line in &lines {
        println!("  {line}");
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Shared fixtures

fn systems() -> Vec<ControlAffineSystem> {
    vec![
        ControlAffineSystem::double_integrator(),
        ControlAffineSystem::unicycle(),
        ControlAffineSystem::dubins(1.0).unwrap(),
    ]
}

fn environments() -> Vec<Environment> {
    vec![
        Environment::arena(),
        Environment::arena_one_circle(),
        Environment::arena_two_circles(),
    ]
}

fn random_model<R: Rng>(rng: &mut R, system: &ControlAffineSystem, env: &Environment) -> CbfModel {
    let dim = system.state_dim() + env.env_dim();
    let config = ModelConfig {
        hidden_layers: rng.random_range(1..=3),
        hidden_width: rng.random_range(2..=8),
        gamma: rng.random_range(0.1..2.0),
        lambda: rng.random_range(0.5..5.0),
        beta: [1.0, 10.0, 100.0][rng.random_range(0..3)],
        periodic_inputs: if rng.random_bool(0.5) { system.kind().periodic_dims() } else { vec![] },
        ..ModelConfig::new(dim)
    };
    let bounds = system.state_domain().concat(&env.distribution.as_box());
    let mut params = init_params(&config, rng.random()).unwrap();
    // Non-zero biases so the softplus head is not centred at zero.
    for layer in &mut params.layers {
        layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    CbfModel::new(config, InputNormalizer::from_box(&bounds), params).unwrap()
}

/// Distance to the nearest branch switch of the loss at one sample: the
/// `min` of the residual, the `(·)₊` of the violation, and Hamiltonian ties.
fn kink_margin(model: &CbfModel, system: &ControlAffineSystem, tree: &ConstraintTree, xi: &[f64]) -> f64 {
    let n = system.state_dim();
    let m = system.input_dim();
    let t = sample_terms(model, system, tree, &xi[..n], &xi[n..]).unwrap();
    let g = system.actuation(&xi[..n]);
    let tie = (0..m)
        .map(|j| (0..n).map(|i| t.grad_h[i] * g[i * m + j]).sum::<f64>().abs())
        .fold(f64::INFINITY, f64::min);
    (t.delta - t.condition).abs().min(t.condition.abs()).min(tie)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

// ---------------------------------------------------------------------------
// 1. Gradient fidelity

fn gradient_fidelity() -> Outcome {
    const CONFIGS: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_hj, mut worst_cbf, mut worst_x) = (0.0f64, 0.0f64, 0.0f64);
    let mut done = 0;
    while done < CONFIGS {
        let system = &systems()[rng.random_range(0..3)];
        let env = &environments()[rng.random_range(0..3)];
        let model = random_model(&mut rng, system, env);
        let n = system.state_dim();
        let domain = system.state_domain().concat(&env.distribution.as_box());
        let mut rows = Vec::new();
        let mut violating = 0;
        for _ in 0..200 {
            if rows.len() == 6 {
                break;
            }
            let xi = domain.sample(&mut rng);
            if kink_margin(&model, system, &env.tree, &xi) > 1e-3 {
                let t = sample_terms(&model, system, &env.tree, &xi[..n], &xi[n..]).unwrap();
                violating += usize::from(t.condition < 0.0);
                rows.push(xi);
            }
        }
        // Both terms need a non-zero gradient to be compared.
        if rows.len() < 6 || violating == 0 {
            continue;
        }
        let batch = Array2::from_shape_vec((rows.len(), domain.dim()), rows.concat()).unwrap();
        let spec = |lambda| LossSpec {
            gamma: model.config.gamma,
            lambda,
            beta: model.config.beta,
        };
        let grad = |lambda: f64| {
            loss_param_gradient(&model, batch.view(), &spec(lambda), system, &env.tree)
                .unwrap()
                .grad
                .to_flat()
        };
        let g_hj = grad(0.0);
        let g_cbf: Vec<f64> = grad(1.0).iter().zip(&g_hj).map(|(a, b)| a - b).collect();
        let terms_at = |flat: &[f64]| {
            let mut m = model.clone();
            m.params.set_flat(flat);
            let lg = loss_param_gradient(&m, batch.view(), &spec(1.0), system, &env.tree)
                .unwrap();
            (lg.loss_hj, lg.loss_cbf)
        };
        let base = model.params.to_flat();
        let eps = 1e-6;
        let mut fd_hj = vec![0.0; base.len()];
        let mut fd_cbf = vec![0.0; base.len()];
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += eps;
            let up = terms_at(&p);
            p[k] -= 2.0 * eps;
            let down = terms_at(&p);
            fd_hj[k] = (up.0 - down.0) / (2.0 * eps);
            fd_cbf[k] = (up.1 - down.1) / (2.0 * eps);
        }
        worst_hj = worst_hj.max(rel_err(&g_hj, &fd_hj));
        worst_cbf = worst_cbf.max(rel_err(&g_cbf, &fd_cbf));

        // ∇ₓh against central differences at every row.
        for xi in &rows {
            let (x, e) = xi.split_at(n);
            let g = model.h_gradient_x(&env.tree, x, e).unwrap();
            let h = 1e-5;
            for i in 0..n {
                let mut xp = x.to_vec();
                xp[i] += h;
                let up = model.h_forward(&env.tree, &xp, e).unwrap();
                xp[i] -= 2.0 * h;
                let down = model.h_forward(&env.tree, &xp, e).unwrap();
                let fd = (up - down) / (2.0 * h);
                worst_x = worst_x.max((g[i] - fd).abs() / fd.abs().max(1.0));
            }
        }
        done += 1;
    }
    Outcome::new(
        worst_hj <= 1e-5 && worst_cbf <= 1e-5 && worst_x <= 1e-6,
        format!(
            "{CONFIGS} configs: max rel err L_HJ {worst_hj:.2e}, L_CBF {worst_cbf:.2e} (tol 1e-5); grad_x h {worst_x:.2e} (tol 1e-6)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Containment

fn random_tree<R: Rng>(rng: &mut R, depth: usize, n: usize, slots: &mut usize) -> ConstraintTree {
    if depth == 0 || rng.random_bool(0.3) {
        return match rng.random_range(0..3) {
            0 => ConstraintTree::HalfspaceLower {
                dim: rng.random_range(0..n),
                bound: rng.random_range(-3.0..3.0),
            },
            1 => ConstraintTree::HalfspaceUpper {
                dim: rng.random_range(0..n),
                bound: rng.random_range(-3.0..3.0),
            },
            _ => {
                let base = *slots;
                *slots += 3;
                ConstraintTree::circle([base + 1, base + 2], base)
            }
        };
    }
    let op = rng.random_range(0..3);
    if op == 2 {
        return ConstraintTree::neg(random_tree(rng, depth - 1, n, slots));
    }
    let k = rng.random_range(1..=3);
    let children = (0..k).map(|_| random_tree(rng, depth - 1, n, slots)).collect();
    if op == 0 {
        ConstraintTree::min(children)
    } else {
        ConstraintTree::max(children)
    }
}

fn containment() -> Outcome {
    const NETS: usize = 1000;
    const PER_NET: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0usize;
    for _ in 0..NETS {
        let system = &systems()[rng.random_range(0..3)];
        let n = system.state_dim();
        let mut slots = 0;
        let tree = random_tree(&mut rng, 3, n, &mut slots);
        let mut ranges = Vec::new();
        for s in 0..slots {
            ranges.push(if s % 3 == 0 { [0.5, 2.0] } else { [-4.0, 4.0] });
        }
        let env = Environment {
            tree,
            distribution: EnvDistribution::new(ranges).unwrap(),
        };
        let model = random_model(&mut rng, system, &env);
        let domain = BoxBounds::from_pairs(&vec![[-6.0, 6.0]; n]).unwrap();
        for _ in 0..PER_NET {
            let x = domain.sample(&mut rng);
            let e = env.distribution.as_box().sample(&mut rng);
            let c = env.tree.eval(&x, &e).unwrap();
            let c_low = env.tree.eval_smooth_lower(&x, &e, model.config.beta).unwrap();
            let h = model.h_forward(&env.tree, &x, &e).unwrap();
            let excess = (h - c_low).max(c_low - c);
            worst = worst.max(excess);
            violations += usize::from(excess > 1e-12);
        }
    }
    Outcome::new(
        violations == 0,
        format!(
            "{} samples: {violations} with h > c_lower or c_lower > c beyond 1e-12 (max excess {worst:.2e})",
            NETS * PER_NET
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. LSE sandwich

fn lse_sandwich() -> Outcome {
    const VECTORS: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = f64::NEG_INFINITY;
    for k in 0..VECTORS {
        let beta = [1.0, 10.0, 100.0][k % 3];
        let len = rng.random_range(1..=16);
        let scale = [1e-3, 1.0, 1e3][rng.random_range(0..3)];
        let s: Vec<f64> = (0..len).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let upper = lse(&s, beta);
        let lower = upper - (len as f64).ln() / beta;
        worst = worst.max(lower - max).max(max - upper);
    }
    Outcome::new(
        worst <= 1e-10,
        format!("{VECTORS} vectors, beta in {{1,10,100}}: max bound violation {worst:.2e} (tol 1e-10)"),
    )
}

// ---------------------------------------------------------------------------
// 4. Hamiltonian and QP oracles

fn vertex_hamiltonian(system: &ControlAffineSystem, x: &[f64], p: &[f64]) -> f64 {
    let m = system.input_dim();
    let (lo, hi) = (&system.inputs().lower, &system.inputs().upper);
    (0..1usize << m)
        .map(|mask| {
            let u: Vec<f64> = (0..m).map(|j| if mask >> j & 1 == 1 { hi[j] } else { lo[j] }).collect();
            let rate = system.eval_dynamics(x, &u).unwrap();
            p.iter().zip(&rate).map(|(a, b)| a * b).sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Minimizer of ‖u − u_ref‖² over the box ∩ {aᵀu ≥ b}, by scanning.
///
/// If the clamped reference is feasible it is optimal; otherwise the optimum
/// lies on the line aᵀu = b, which is walked at `res` spacing inside the box.
fn brute_force_qp(p: &FilterProblem, res: f64) -> Option<(Vec<f64>, f64)> {
    let clamped: Vec<f64> = (0..2).map(|j| p.u_ref[j].clamp(p.lower[j], p.upper[j])).collect();
    if p.slack(&clamped) >= 0.0 {
        return Some((clamped.clone(), p.objective(&clamped)));
    }
    let (a0, a1) = (p.a[0], p.a[1]);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut consider = |u: Vec<f64>| {
        let f = p.objective(&u);
        if best.as_ref().is_none_or(|(_, g)| f < *g) {
            best = Some((u, f));
        }
    };
    // Parametrize along the coordinate with the larger normal component.
    let (free, tied, af, at) = if a1.abs() >= a0.abs() { (0, 1, a0, a1) } else { (1, 0, a1, a0) };
    if at == 0.0 {
        return None;
    }
    let (lo, hi) = (p.lower[free], p.upper[free]);
    let steps = ((hi - lo) / res).ceil() as usize;
    for k in 0..=steps {
        let s = (lo + k as f64 * res).min(hi);
        let t = (p.b - af * s) / at;
        if t >= p.lower[tied] - 1e-12 && t <= p.upper[tied] + 1e-12 {
            let mut u = vec![0.0; 2];
            u[free] = s;
            u[tied] = t.clamp(p.lower[tied], p.upper[tied]);
            consider(u);
        }
    }
    best
}

fn hamiltonian_and_qp() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_h = 0.0f64;
    for k in 0..100_000 {
        let system = &systems()[k % 3];
        let x = system.state_domain().sample(&mut rng);
        let p: Vec<f64> = (0..system.state_dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let closed = system.hamiltonian_max(&x, &p).unwrap().value;
        worst_h = worst_h.max((closed - vertex_hamiltonian(system, &x, &p)).abs());
    }

    const PROBLEMS: usize = 100_000;
    let res = 1e-4;
    let (mut worst_u, mut worst_obj) = (0.0f64, f64::NEG_INFINITY);
    let mut status_mismatch = 0;
    let mut infeasible = 0;
    for _ in 0..PROBLEMS {
        let lower = vec![rng.random_range(-2.0..0.0), rng.random_range(-2.0..0.0)];
        let upper = vec![lower[0] + rng.random_range(0.1..3.0), lower[1] + rng.random_range(0.1..3.0)];
        let problem = FilterProblem {
            u_ref: vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
            a: vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
            b: rng.random_range(-2.0..2.0),
            lower,
            upper,
        };
        let solved = solve_halfspace_box_qp(&problem).unwrap();
        let best_corner = problem.slack(&problem.most_feasible_vertex());
        match brute_force_qp(&problem, res) {
            Some((u, f)) if best_corner >= 0.0 => {
                if solved.status != QpStatus::Optimal {
                    status_mismatch += 1;
                    continue;
                }
                let du = u.iter().zip(&solved.u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst_u = worst_u.max(du);
                // The scan can only be worse than the true optimum.
                worst_obj = worst_obj.max(problem.objective(&solved.u) - f);
            }
            _ => {
                infeasible += 1;
                if solved.status != QpStatus::Infeasible {
                    status_mismatch += 1;
                }
            }
        }
    }
    let passed = worst_h <= 1e-12 && status_mismatch == 0 && worst_u <= 2.0 * res && worst_obj <= 1e-9;
    Outcome::new(
        passed,
        format!(
            "hamiltonian max |closed - vertices| {worst_h:.2e} (tol 1e-12); qp {PROBLEMS} problems ({infeasible} infeasible): \
             {status_mismatch} status mismatches, max |u - brute| {worst_u:.2e} (tol {:.0e}), objective excess {worst_obj:.2e}",
            2.0 * res
        ),
    )
}
