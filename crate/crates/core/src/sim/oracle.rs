//! Grid value iteration for the viability kernel of 2-state systems.
//!
//! Iterates `B ← min(c, B + dt·(max_u ∇B·(f + g u) + γB))` from `B = c` with
//! first-order upwind differences. Nodes outside the grid take the exact
//! constraint value. With `dt` inside the CFL bound the update is monotone,
//! so `B` decreases pointwise and the 0-superlevel set shrinks toward the
//! discrete kernel.
//!
//! Outside the grid the scheme only sees `c`, which is far less negative
//! than the true value of states that are leaving the box. Grids should
//! extend past the safe set (see [`GridAxis::with_margin`]) and a small `γ`
//! keeps the discount from amplifying the scheme's smearing.

use serde::{Deserialize, Serialize};

use super::grid::{GridAxis, GridSpec};
use crate::environment::ConstraintTree;
use crate::error::{Error, Result};
use crate::systems::ControlAffineSystem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub gamma: f64,
    /// Pseudo-time step; `None` uses 0.9 of the CFL bound.
    pub dt: Option<f64>,
    pub max_iters: usize,
    /// Stop once `max |B⁺ − B| / dt` falls below this.
    pub tol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            gamma: 0.05,
            dt: None,
            max_iters: 50_000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrid {
    pub spec: GridSpec,
    pub value: Vec<f64>,
    pub mask: Vec<bool>,
    pub constraint: Vec<f64>,
    pub iterations: usize,
    /// Last `max |B⁺ − B| / dt`.
    pub residual: f64,
    pub converged: bool,
    pub dt: f64,
}

impl KernelGrid {
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.spec.axes[1].count + j
    }

    /// Drops `cells` nodes from every side, e.g. to strip a margin added
    /// with [`GridAxis::with_margin`].
    pub fn crop(&self, cells: usize) -> KernelGrid {
        let [a0, a1] = self.spec.axes;
        let keep = |a: GridAxis| GridAxis::new(a.dim, a.node(cells), a.node(a.count - 1 - cells), a.count - 2 * cells);
        let (c0, c1) = (keep(a0), keep(a1));
        let pick = |v: &[f64]| -> Vec<f64> {
            (cells..a0.count - cells)
                .flat_map(|i| (cells..a1.count - cells).map(move |j| (i, j)))
                .map(|(i, j)| v[i * a1.count + j])
                .collect()
        };
        let value = pick(&self.value);
        KernelGrid {
            spec: GridSpec::new([c0, c1], self.spec.base_state.clone()),
            mask: value.iter().map(|&v| v >= 0.0).collect(),
            value,
            constraint: pick(&self.constraint),
            ..self.clone()
        }
    }

    /// Mask grown by `cells` in the Chebyshev sense.
    pub fn dilated_mask(&self, cells: usize) -> Vec<bool> {
        dilate(&self.mask, self.spec.axes[0].count, self.spec.axes[1].count, cells)
    }
}

pub(crate) fn dilate(mask: &[bool], rows: usize, cols: usize, cells: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for i in 0..rows {
        for j in 0..cols {
            if !mask[i * cols + j] {
                continue;
            }
            for a in i.saturating_sub(cells)..=(i + cells).min(rows - 1) {
                for b in j.saturating_sub(cells)..=(j + cells).min(cols - 1) {
                    out[a * cols + b] = true;
                }
            }
        }
    }
    out
}

/// Maximal control invariant set of `ẍ = u`, `|u| ≤ accel`, inside
/// `x_range × v_range`: the braking parabolas at both walls.
pub fn analytic_double_integrator_kernel(
    x: f64,
    v: f64,
    x_range: [f64; 2],
    v_range: [f64; 2],
    accel: f64,
) -> bool {
    let in_box = x >= x_range[0] && x <= x_range[1] && v >= v_range[0] && v <= v_range[1];
    let stop = v * v / (2.0 * accel);
    in_box && (v <= 0.0 || x <= x_range[1] - stop) && (v >= 0.0 || x >= x_range[0] + stop)
}

pub fn grid_viability_kernel(
    system: &ControlAffineSystem,
    tree: &ConstraintTree,
    e: &[f64],
    axes: [GridAxis; 2],
    config: &OracleConfig,
) -> Result<KernelGrid> {
    if system.state_dim() != 2 {
        return Err(Error::Config(format!(
            "the grid oracle handles 2-state systems only, `{}` has {}",
            system.name(),
            system.state_dim()
        )));
    }
    if e.len() < tree.env_dim() {
        return Err(Error::Shape {
            what: "environment parameters",
            expected: tree.env_dim(),
            actual: e.len(),
        });
    }
    if axes[0].dim != 0 || axes[1].dim != 1 || axes.iter().any(|a| a.count < 2) {
        return Err(Error::Config(
            "oracle axes must be dims 0 then 1 with at least 2 nodes each".into(),
        ));
    }
    if !(config.gamma >= 0.0) || !(config.tol > 0.0) {
        return Err(Error::Config("oracle needs gamma ≥ 0 and tol > 0".into()));
    }
    let spec = GridSpec::new(axes, vec![0.0, 0.0]);
    spec.validate(2)?;
    let (nx, nv) = (axes[0].count, axes[1].count);
    let (hx, hv) = (axes[0].spacing(), axes[1].spacing());
    let total = nx * nv;
    let idx = |i: usize, j: usize| i * nv + j;

    let c_at = |x0: f64, x1: f64| tree.eval(&[x0, x1], e);
    let mut c = Vec::with_capacity(total);
    for i in 0..nx {
        for j in 0..nv {
            c.push(c_at(axes[0].node(i), axes[1].node(j))?);
        }
    }
    // Ghost layers: [below dim0, above dim0] per j, [below dim1, above dim1] per i.
    let mut ghost0 = [vec![0.0; nv], vec![0.0; nv]];
    for j in 0..nv {
        let x1 = axes[1].node(j);
        ghost0[0][j] = c_at(axes[0].min - hx, x1)?;
        ghost0[1][j] = c_at(axes[0].max + hx, x1)?;
    }
    let mut ghost1 = [vec![0.0; nx], vec![0.0; nx]];
    for i in 0..nx {
        let x0 = axes[0].node(i);
        ghost1[0][i] = c_at(x0, axes[1].min - hv)?;
        ghost1[1][i] = c_at(x0, axes[1].max + hv)?;
    }

    // Vector field at every node for every input vertex.
    let vertices = box_vertices(&system.inputs().lower, &system.inputs().upper);
    let mut rates = Vec::with_capacity(total * vertices.len());
    let mut max_rate: f64 = 0.0;
    for i in 0..nx {
        for j in 0..nv {
            let x = [axes[0].node(i), axes[1].node(j)];
            for u in &vertices {
                let r = system.eval_dynamics(&x, u)?;
                max_rate = max_rate.max(r[0].abs() / hx + r[1].abs() / hv);
                rates.push([r[0], r[1]]);
            }
        }
    }
    let cfl = if max_rate > 0.0 { 1.0 / max_rate } else { f64::INFINITY };
    let dt = match config.dt {
        Some(dt) if dt > 0.0 => dt,
        Some(dt) => return Err(Error::Config(format!("oracle dt must be positive, got {dt}"))),
        None if cfl.is_finite() => 0.9 * cfl,
        None => 0.1,
    };
    let nvert = vertices.len();

    let mut b = c.clone();
    let mut next = vec![0.0; total];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < config.max_iters {
        iterations += 1;
        let mut max_change: f64 = 0.0;
        for i in 0..nx {
            for j in 0..nv {
                let k = idx(i, j);
                let here = b[k];
                let up0 = if i + 1 < nx { b[idx(i + 1, j)] } else { ghost0[1][j] };
                let dn0 = if i > 0 { b[idx(i - 1, j)] } else { ghost0[0][j] };
                let up1 = if j + 1 < nv { b[idx(i, j + 1)] } else { ghost1[1][i] };
                let dn1 = if j > 0 { b[idx(i, j - 1)] } else { ghost1[0][i] };
                let (fwd0, bwd0) = ((up0 - here) / hx, (here - dn0) / hx);
                let (fwd1, bwd1) = ((up1 - here) / hv, (here - dn1) / hv);
                let mut ham = f64::NEG_INFINITY;
                for r in &rates[k * nvert..(k + 1) * nvert] {
                    let d0 = if r[0] > 0.0 { r[0] * fwd0 } else { r[0] * bwd0 };
                    let d1 = if r[1] > 0.0 { r[1] * fwd1 } else { r[1] * bwd1 };
                    ham = ham.max(d0 + d1);
                }
                let v = c[k].min(here + dt * (ham + config.gamma * here));
                max_change = max_change.max((v - here).abs());
                next[k] = v;
            }
        }
        std::mem::swap(&mut b, &mut next);
        residual = max_change / dt;
        if residual < config.tol {
            break;
        }
    }
    let converged = residual < config.tol;
    let mask = b.iter().map(|&v| v >= 0.0).collect();
    Ok(KernelGrid {
        spec,
        value: b,
        mask,
        constraint: c,
        iterations,
        residual,
        converged,
        dt,
    })
}

fn box_vertices(lower: &[f64], upper: &[f64]) -> Vec<Vec<f64>> {
    let m = lower.len();
    (0..1usize << m)
        .map(|bits| {
            (0..m)
                .map(|j| if bits >> j & 1 == 1 { upper[j] } else { lower[j] })
                .collect()
        })
        .collect()
}
