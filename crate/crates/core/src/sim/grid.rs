use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::fmt_f64;
use crate::error::{check_len, Error, Result};
use crate::network::CbfOperator;
use crate::parallel;

/// `count` evenly spaced nodes on `[min, max]` along state dimension `dim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub dim: usize,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn new(dim: usize, min: f64, max: f64, count: usize) -> Self {
        Self {
            dim,
            min,
            max,
            count,
        }
    }

    /// Axis over `[min, max]` with `count` nodes, extended by `cells` extra
    /// nodes of the same spacing on both ends.
    pub fn with_margin(dim: usize, min: f64, max: f64, count: usize, cells: usize) -> Self {
        let h = if count < 2 { 0.0 } else { (max - min) / (count - 1) as f64 };
        let pad = h * cells as f64;
        Self::new(dim, min - pad, max + pad, count + 2 * cells)
    }

    pub fn node(&self, k: usize) -> f64 {
        if self.count == 1 {
            self.min
        } else {
            self.min + (self.max - self.min) * k as f64 / (self.count - 1) as f64
        }
    }

    pub fn spacing(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.max - self.min) / (self.count - 1) as f64
        }
    }

    fn validate(&self, state_dim: usize) -> Result<()> {
        if self.dim >= state_dim {
            return Err(Error::Config(format!(
                "grid axis dim {} out of range for a {state_dim}-state system",
                self.dim
            )));
        }
        if self.count == 0 || !(self.min <= self.max) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::InvalidRange {
                what: "grid axis",
                index: self.dim,
                lower: self.min,
                upper: self.max,
            });
        }
        Ok(())
    }
}

/// Two plotted axes; every other state coordinate is taken from `base_state`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: [GridAxis; 2],
    #[serde(default)]
    pub base_state: Vec<f64>,
}

impl GridSpec {
    pub fn new(axes: [GridAxis; 2], base_state: Vec<f64>) -> Self {
        Self { axes, base_state }
    }

    pub fn len(&self) -> usize {
        self.axes[0].count * self.axes[1].count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        check_len("grid base state", state_dim, self.base_state.len())?;
        for a in &self.axes {
            a.validate(state_dim)?;
        }
        if self.axes[0].dim == self.axes[1].dim {
            return Err(Error::Config("grid axes must use different dims".into()));
        }
        Ok(())
    }

    /// State at node `(i, j)`; `i` indexes the first axis.
    pub fn state(&self, i: usize, j: usize) -> Vec<f64> {
        let mut x = self.base_state.clone();
        x[self.axes[0].dim] = self.axes[0].node(i);
        x[self.axes[1].dim] = self.axes[1].node(j);
        x
    }
}

/// Values at grid nodes, row-major with the first axis outer.
#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub spec: GridSpec,
    pub e: Vec<f64>,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl GridReport {
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.spec.axes[1].count + j
    }

    /// `h ≥ 0` per node.
    pub fn safe_mask(&self) -> Vec<bool> {
        self.h.iter().map(|&h| h >= 0.0).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x0,x1,h,c")?;
        let [a0, a1] = self.spec.axes;
        for i in 0..a0.count {
            for j in 0..a1.count {
                let k = self.index(i, j);
                writeln!(
                    out,
                    "{},{},{},{}",
                    fmt_f64(a0.node(i)),
                    fmt_f64(a1.node(j)),
                    fmt_f64(self.h[k]),
                    fmt_f64(self.c[k])
                )?;
            }
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::network::write_atomic(path, &buf)
    }
}

/// `h_θ(·, e)` and `c(·, e)` at every node of `spec`.
pub fn eval_grid(operator: &CbfOperator, e: &[f64], spec: &GridSpec) -> Result<GridReport> {
    let n = operator.state_dim();
    spec.validate(n)?;
    check_len("environment parameters", operator.env_dim(), e.len())?;
    let tree = &operator.environment.tree;
    let model = &operator.model;
    let rows: Vec<usize> = (0..spec.axes[0].count).collect();
    let cols = spec.axes[1].count;
    let per_row = parallel::map_ordered(&rows, |&i| -> Result<Vec<(f64, f64)>> {
        let mut joint = Array2::zeros((cols, n + e.len()));
        let mut c_lower = Vec::with_capacity(cols);
        let mut c = Vec::with_capacity(cols);
        for j in 0..cols {
            let x = spec.state(i, j);
            c_lower.push(tree.eval_smooth_lower(&x, e, model.config.beta)?);
            c.push(tree.eval(&x, e)?);
            let mut row = joint.row_mut(j);
            for (k, v) in x.iter().chain(e).enumerate() {
                row[k] = *v;
            }
        }
        let delta = model.delta_batch(joint.view())?;
        Ok((0..cols).map(|j| (c_lower[j] - delta[j], c[j])).collect())
    });
    let mut h = Vec::with_capacity(spec.len());
    let mut c = Vec::with_capacity(spec.len());
    for row in per_row {
        for (hv, cv) in row? {
            h.push(hv);
            c.push(cv);
        }
    }
    Ok(GridReport {
        spec: spec.clone(),
        e: e.to_vec(),
        h,
        c,
    })
}
