//! Criteria that train or load learned operators: 5 to 8.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cbf_kit::config::{run_training, Prepared, RunConfig};
use cbf_kit::sim::{
    analytic_double_integrator_kernel, eval_grid, grid_viability_kernel, simulate, GridAxis,
    GridSpec, KernelGrid, OracleConfig, Scenario,
};
use cbf_kit::training::{losses::residual_hj, NoopObserver};
use cbf_kit::{BoxBounds, CbfOperator, ControlAffineSystem, Environment};

use super::Outcome;

const RESOLUTION: usize = 201;
const X_RANGE: [f64; 2] = [0.0, 10.0];
const V_RANGE: [f64; 2] = [-5.0, 5.0];

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets")
}

fn plane_spec() -> GridSpec {
    GridSpec::new(
        [
            GridAxis::new(0, X_RANGE[0], X_RANGE[1], RESOLUTION),
            GridAxis::new(1, V_RANGE[0], V_RANGE[1], RESOLUTION),
        ],
        vec![0.0, 0.0],
    )
}

/// Trains from a run config shipped with the crate.
fn train_recipe(name: &str) -> (Prepared, CbfOperator, f64) {
    let config = RunConfig::load(&assets().join("configs").join(name)).unwrap();
    let prepared = config.prepare(None).unwrap();
    let start = Instant::now();
    let outcome = run_training(&prepared, None, &mut NoopObserver).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let operator = CbfOperator::new(
        outcome.model,
        prepared.system.clone(),
        prepared.environment.clone(),
    )
    .unwrap();
    (prepared, operator, secs)
}

// ---------------------------------------------------------------------------
// 5. Double-integrator kernel

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    inter as f64 / union.max(1) as f64
}

pub fn double_integrator_kernel() -> Outcome {
    let (prepared, operator, secs) = train_recipe("di_arena.json");
    let steps = prepared.train.total_steps(prepared.dataset.len());
    let spec = plane_spec();
    let grid = eval_grid(&operator, &[], &spec).unwrap();
    let learned = grid.safe_mask();
    let [ax, av] = spec.axes;
    let mut analytic = vec![false; spec.len()];
    for i in 0..ax.count {
        for j in 0..av.count {
            analytic[grid.index(i, j)] =
                analytic_double_integrator_kernel(ax.node(i), av.node(j), X_RANGE, V_RANGE, 1.0);
        }
    }
    let score = iou(&learned, &analytic);
    let passed = prepared.dataset.len() == 20_000
        && prepared.model.config.hidden_width == 50
        && prepared.model.config.hidden_layers == 4
        && steps <= 20_000
        && secs <= 15.0 * 60.0
        && score >= 0.90;
    Outcome::new(
        passed,
        format!(
            "N={} width {} depth {}, {steps} steps in {secs:.0}s; IoU {score:.4} (>= 0.90)",
            prepared.dataset.len(),
            prepared.model.config.hidden_width,
            prepared.model.config.hidden_layers
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Operator adaptation

pub fn operator_adaptation() -> Outcome {
    let (prepared, operator, secs) = train_recipe("di_one_circle.json");
    let system = &prepared.system;
    let env = &prepared.environment;
    let state_box = BoxBounds::from_pairs(&[X_RANGE, V_RANGE]).unwrap();

    let mean_sq = |pairs: &mut dyn Iterator<Item = (Vec<f64>, Vec<f64>)>| {
        let (mut sum, mut count) = (0.0, 0usize);
        for (x, e) in pairs {
            let r = residual_hj(&operator.model, system, &env.tree, &x, &e).unwrap();
            sum += r * r;
            count += 1;
        }
        sum / count as f64
    };
    let data = &prepared.dataset;
    let train_res = mean_sq(&mut (0..data.len()).map(|k| {
        let (x, e) = data.get(k);
        (x.to_vec(), e.as_slice().to_vec())
    }));

    let held_out: Vec<Vec<f64>> = env
        .distribution
        .sample(10, 0xfeed)
        .unwrap()
        .into_iter()
        .map(|e| e.0)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0xbeef);
    let per_env = 2000;
    let held_res = mean_sq(&mut held_out.iter().flat_map(|e| {
        (0..per_env)
            .map(|_| (state_box.sample(&mut rng), e.clone()))
            .collect::<Vec<_>>()
    }));
    let ratio = held_res / train_res;

    // Cells inside any obstacle disc that the learned set claims.
    let spec = plane_spec();
    let mut inside = 0usize;
    let mut overlap = 0usize;
    for e in &held_out {
        let grid = eval_grid(&operator, e, &spec).unwrap();
        let [ax, av] = spec.axes;
        for i in 0..ax.count {
            for j in 0..av.count {
                let (x, v) = (ax.node(i), av.node(j));
                if (x - e[1]).hypot(v - e[2]) < e[0] {
                    inside += 1;
                    overlap += usize::from(grid.h[grid.index(i, j)] >= 0.0);
                }
            }
        }
    }
    let passed = prepared.dataset.environments.len() == 50
        && data.len() == 50 * 2000
        && secs <= 45.0 * 60.0
        && ratio <= 3.0
        && overlap == 0;
    Outcome::new(
        passed,
        format!(
            "M=50 N=2000, trained in {secs:.0}s; held-out/train HJ residual {held_res:.3e}/{train_res:.3e} = {ratio:.2} (<= 3); \
             {overlap} of {inside} obstacle cells with h >= 0 (= 0)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Closed-loop safety

pub fn closed_loop_safety() -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for name in ["unicycle_crossing.json", "unicycle_growing.json", "di_obstacle.json"] {
        let base = Scenario::load(&assets().join("scenarios").join(name)).unwrap();
        let operator = base.load_operator().unwrap();
        let (mut reached, mut min_c) = (0, f64::INFINITY);
        let (mut fallback, mut steps) = (0usize, 0usize);
        for k in 0..10 {
            let traj = simulate(&base.perturbed(k), &operator).unwrap();
            reached += usize::from(traj.reached_at.is_some());
            min_c = min_c.min(traj.min_constraint());
            fallback += traj.fallback_steps();
            steps += traj.records.len();
        }
        let frac = fallback as f64 / steps as f64;
        let ok = reached >= 9 && min_c >= -1e-6 && frac < 0.05;
        passed &= ok;
        parts.push(format!(
            "{name}: reached {reached}/10, min c {min_c:.3e}, fallback {:.2}%",
            100.0 * frac
        ));
    }
    Outcome::new(passed, parts.join("; "))
}

// ---------------------------------------------------------------------------
// 8. Oracle self-consistency

const MARGIN: usize = 30;

fn oracle(env: &Environment, e: &[f64]) -> KernelGrid {
    let axes = [
        GridAxis::with_margin(0, X_RANGE[0], X_RANGE[1], RESOLUTION, MARGIN),
        GridAxis::with_margin(1, V_RANGE[0], V_RANGE[1], RESOLUTION, MARGIN),
    ];
    let system = ControlAffineSystem::double_integrator();
    let grid = grid_viability_kernel(&system, &env.tree, e, axes, &OracleConfig::default()).unwrap();
    assert!(grid.converged, "value iteration did not converge");
    grid.crop(MARGIN)
}

/// Cells of `mask` with a 4-neighbour outside it (or on the grid edge).
fn boundary(mask: &[bool], rows: usize, cols: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let k = i * cols + j;
            if !mask[k] {
                continue;
            }
            let edge = i == 0 || j == 0 || i + 1 == rows || j + 1 == cols;
            if edge
                || !mask[k - cols]
                || !mask[k + cols]
                || !mask[k - 1]
                || !mask[k + 1]
            {
                out.push(k);
            }
        }
    }
    out
}

pub fn oracle_consistency() -> Outcome {
    let free = oracle(&Environment::arena(), &[]);
    let [ax, av] = free.spec.axes;
    let mut agree = 0;
    for i in 0..ax.count {
        for j in 0..av.count {
            let exact = analytic_double_integrator_kernel(ax.node(i), av.node(j), X_RANGE, V_RANGE, 1.0);
            agree += usize::from(free.mask[free.index(i, j)] == exact);
        }
    }
    let agreement = agree as f64 / free.mask.len() as f64;

    // One obstacle at a fixed position.
    let (prepared, operator, secs) = train_recipe("di_fixed_obstacle.json");
    let e = prepared.dataset.environments[0].0.clone();
    let with_obstacle = oracle(&operator.environment, &e);
    let dilated = with_obstacle.dilated_mask(2);
    let learned = eval_grid(&operator, &e, &with_obstacle.spec).unwrap().safe_mask();
    let cells = boundary(&learned, ax.count, av.count);
    let inside = cells.iter().filter(|&&k| dilated[k]).count();
    let subset = inside as f64 / cells.len().max(1) as f64;

    Outcome::new(
        agreement >= 0.98 && subset >= 0.95 && !cells.is_empty(),
        format!(
            "obstacle-free oracle vs analytic {:.2}% (>= 98%); obstacle {e:?} (trained in {secs:.0}s): \
             learned boundary inside 2-cell dilated oracle {:.2}% of {} cells (>= 95%)",
            100.0 * agreement,
            100.0 * subset,
            cells.len()
        ),
    )
}
