//! Exact projection onto `{u ∈ box : aᵀu ≥ b}`.
//!
//! At the optimum every coordinate is either free or pinned to one of its
//! bounds, and the halfspace is either active or slack. Enumerating the
//! `2·3^m` combinations, solving each in closed form and keeping the best
//! feasible candidate gives the exact minimizer; `m ≤ 2` for every builtin
//! system, so this is at most 18 tiny solves.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::systems::TIE_TOL;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterProblem {
    pub u_ref: Vec<f64>,
    pub a: Vec<f64>,
    pub b: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: Vec<f64>,
    pub status: QpStatus,
}

const MAX_INPUT_DIM: usize = 8;

#[derive(Clone, Copy)]
enum Face {
    Free,
    Lower,
    Upper,
}

impl FilterProblem {
    fn validate(&self) -> Result<()> {
        let m = self.u_ref.len();
        check_len("qp halfspace normal", m, self.a.len())?;
        check_len("qp lower bounds", m, self.lower.len())?;
        check_len("qp upper bounds", m, self.upper.len())?;
        if m == 0 || m > MAX_INPUT_DIM {
            return Err(Error::Config(format!("qp input dimension {m} unsupported")));
        }
        check_finite("qp reference", &self.u_ref)?;
        check_finite("qp halfspace normal", &self.a)?;
        check_finite("qp offset", &[self.b])?;
        for j in 0..m {
            if !(self.lower[j] <= self.upper[j]) {
                return Err(Error::InvalidRange {
                    what: "qp box",
                    index: j,
                    lower: self.lower[j],
                    upper: self.upper[j],
                });
            }
        }
        Ok(())
    }

    /// Box vertex maximizing `aᵀu`; ties resolve to the lower bound.
    pub fn most_feasible_vertex(&self) -> Vec<f64> {
        self.a
            .iter()
            .enumerate()
            .map(|(j, &aj)| if aj > TIE_TOL { self.upper[j] } else { self.lower[j] })
            .collect()
    }

    pub fn objective(&self, u: &[f64]) -> f64 {
        u.iter().zip(&self.u_ref).map(|(a, b)| (a - b).powi(2)).sum()
    }

    pub fn slack(&self, u: &[f64]) -> f64 {
        self.a.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() - self.b
    }

    fn clamp(&self, u: &mut [f64]) {
        for (j, v) in u.iter_mut().enumerate() {
            *v = v.clamp(self.lower[j], self.upper[j]);
        }
    }
}

pub fn solve_halfspace_box_qp(problem: &FilterProblem) -> Result<QpSolution> {
    problem.validate()?;
    let m = problem.u_ref.len();
    let vertex = problem.most_feasible_vertex();
    if problem.slack(&vertex) < 0.0 {
        return Ok(QpSolution {
            u: vertex,
            status: QpStatus::Infeasible,
        });
    }
    let scale = 1.0
        + problem.b.abs()
        + problem
            .a
            .iter()
            .zip(problem.lower.iter().zip(&problem.upper))
            .map(|(a, (l, u))| a.abs() * l.abs().max(u.abs()))
            .sum::<f64>();
    let tol = 1e-12 * scale;

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut faces = [Face::Free; MAX_INPUT_DIM];
    let combos = 3usize.pow(m as u32);
    for code in 0..combos {
        let mut c = code;
        for face in faces.iter_mut().take(m) {
            *face = match c % 3 {
                0 => Face::Free,
                1 => Face::Lower,
                _ => Face::Upper,
            };
            c /= 3;
        }
        let mut u = problem.u_ref.clone();
        for j in 0..m {
            match faces[j] {
                Face::Free => {}
                Face::Lower => u[j] = problem.lower[j],
                Face::Upper => u[j] = problem.upper[j],
            }
        }
        let mut candidates = vec![u.clone()];
        // Halfspace active: move the free coordinates along a_F onto aᵀu = b.
        let norm2: f64 = (0..m)
            .filter(|&j| matches!(faces[j], Face::Free))
            .map(|j| problem.a[j] * problem.a[j])
            .sum();
        if norm2 > 0.0 {
            let t = -problem.slack(&u) / norm2;
            for j in 0..m {
                if matches!(faces[j], Face::Free) {
                    u[j] += t * problem.a[j];
                }
            }
            candidates.push(u);
        }
        for cand in candidates {
            let in_box = cand
                .iter()
                .enumerate()
                .all(|(j, &v)| v >= problem.lower[j] - tol && v <= problem.upper[j] + tol);
            if !in_box || problem.slack(&cand) < -tol {
                continue;
            }
            let obj = problem.objective(&cand);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, cand));
            }
        }
    }

    let u = match best {
        Some((_, mut u)) => {
            problem.clamp(&mut u);
            if problem.slack(&u) < -1e-9 * scale {
                vertex
            } else {
                u
            }
        }
        None => vertex,
    };
    Ok(QpSolution {
        u,
        status: QpStatus::Optimal,
    })
}
