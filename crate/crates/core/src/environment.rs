//! Parametric safe sets `c(x, e)` built from constraint primitives.
//!
//! A [`ConstraintTree`] is evaluated two ways: exactly, with hard `min`/`max`,
//! and as a smooth lower bound `c̲(x, e) ≤ c(x, e)` where every `max` is
//! replaced by `LSE(s; β) − log(k)/β` and every `min` by `−LSE(−s; β)`.
//! Negation swaps lower and upper bounds, so the recursion carries both.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::BoxBounds;
use crate::error::{Error, Result};

pub const DEFAULT_BETA: f64 = 10.0;

/// Environment parameter vector `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnvParams(pub Vec<f64>);

impl EnvParams {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for EnvParams {
    fn from(v: Vec<f64>) -> Self {
        EnvParams(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintTree {
    /// `‖x_pos − o‖² − r²`, with `o` and `r` read from `e`.
    CircleKeepout {
        center_slots: Vec<usize>,
        radius_slot: usize,
        position_dims: Vec<usize>,
    },
    /// `x[dim] − bound`.
    HalfspaceLower { dim: usize, bound: f64 },
    /// `bound − x[dim]`.
    HalfspaceUpper { dim: usize, bound: f64 },
    Min { children: Vec<ConstraintTree> },
    Max { children: Vec<ConstraintTree> },
    Neg { child: Box<ConstraintTree> },
}

/// Smooth lower and upper bounds of a subtree with their gradients over the
/// joint vector `(x, e)`.
#[derive(Debug, Clone)]
struct Bounds {
    lower: f64,
    upper: f64,
    d_lower: Vec<f64>,
    d_upper: Vec<f64>,
}

impl ConstraintTree {
    pub fn min(children: Vec<ConstraintTree>) -> Self {
        ConstraintTree::Min { children }
    }

    pub fn max(children: Vec<ConstraintTree>) -> Self {
        ConstraintTree::Max { children }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(child: ConstraintTree) -> Self {
        ConstraintTree::Neg {
            child: Box::new(child),
        }
    }

    pub fn circle(center_slots: [usize; 2], radius_slot: usize) -> Self {
        ConstraintTree::CircleKeepout {
            center_slots: center_slots.to_vec(),
            radius_slot,
            position_dims: vec![0, 1],
        }
    }

    /// Four halfspaces keeping `x[dims[0]]`, `x[dims[1]]` inside a rectangle.
    pub fn rectangle(dims: [usize; 2], ranges: [[f64; 2]; 2]) -> Vec<Self> {
        let mut out = Vec::with_capacity(4);
        for (dim, [lo, hi]) in dims.into_iter().zip(ranges) {
            out.push(ConstraintTree::HalfspaceLower { dim, bound: lo });
            out.push(ConstraintTree::HalfspaceUpper { dim, bound: hi });
        }
        out
    }

    /// Checks arity, state dims and environment slots.
    pub fn validate(&self, state_dim: usize, env_dim: usize) -> Result<()> {
        let dim_ok = |dim: usize| {
            if dim < state_dim {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "constraint refers to state dim {dim} but n = {state_dim}"
                )))
            }
        };
        let slot_ok = |slot: usize| {
            if slot < env_dim {
                Ok(())
            } else {
                Err(Error::SlotOutOfRange {
                    slot,
                    n_env: env_dim,
                })
            }
        };
        match self {
            ConstraintTree::CircleKeepout {
                center_slots,
                radius_slot,
                position_dims,
            } => {
                if center_slots.len() != position_dims.len() || center_slots.is_empty() {
                    return Err(Error::Config(
                        "circle keepout needs one center slot per position dim".into(),
                    ));
                }
                center_slots.iter().try_for_each(|&s| slot_ok(s))?;
                position_dims.iter().try_for_each(|&d| dim_ok(d))?;
                slot_ok(*radius_slot)
            }
            ConstraintTree::HalfspaceLower { dim, bound }
            | ConstraintTree::HalfspaceUpper { dim, bound } => {
                if !bound.is_finite() {
                    return Err(Error::Config("halfspace bound must be finite".into()));
                }
                dim_ok(*dim)
            }
            ConstraintTree::Min { children } | ConstraintTree::Max { children } => {
                if children.len() < 2 {
                    return Err(Error::Config(format!(
                        "min/max node needs at least 2 children, got {}",
                        children.len()
                    )));
                }
                children
                    .iter()
                    .try_for_each(|c| c.validate(state_dim, env_dim))
            }
            ConstraintTree::Neg { child } => child.validate(state_dim, env_dim),
        }
    }

    /// Environment slots holding circle radii.
    pub fn radius_slots(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.visit(&mut |node| {
            if let ConstraintTree::CircleKeepout { radius_slot, .. } = node {
                out.push(*radius_slot);
            }
        });
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Circle keepouts as `(center_slots, radius_slot, position_dims)`.
    pub fn circles(&self) -> Vec<(Vec<usize>, usize, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |node| {
            if let ConstraintTree::CircleKeepout {
                center_slots,
                radius_slot,
                position_dims,
            } = node
            {
                out.push((center_slots.clone(), *radius_slot, position_dims.clone()));
            }
        });
        out
    }

    /// Number of parameter slots referenced (max slot + 1).
    pub fn env_dim(&self) -> usize {
        let mut max = 0;
        self.visit(&mut |node| {
            if let ConstraintTree::CircleKeepout {
                center_slots,
                radius_slot,
                ..
            } = node
            {
                for &s in center_slots.iter().chain(std::iter::once(radius_slot)) {
                    max = max.max(s + 1);
                }
            }
        });
        max
    }

    /// Nesting depth counting only min/max nodes.
    pub fn depth(&self) -> usize {
        match self {
            ConstraintTree::Min { children } | ConstraintTree::Max { children } => {
                1 + children.iter().map(|c| c.depth()).max().unwrap_or(0)
            }
            ConstraintTree::Neg { child } => child.depth(),
            _ => 0,
        }
    }

    pub fn max_branching(&self) -> usize {
        match self {
            ConstraintTree::Min { children } | ConstraintTree::Max { children } => children
                .iter()
                .map(|c| c.max_branching())
                .max()
                .unwrap_or(0)
                .max(children.len()),
            ConstraintTree::Neg { child } => child.max_branching(),
            _ => 1,
        }
    }

    fn visit<F: FnMut(&ConstraintTree)>(&self, f: &mut F) {
        f(self);
        match self {
            ConstraintTree::Min { children } | ConstraintTree::Max { children } => {
                children.iter().for_each(|c| c.visit(f))
            }
            ConstraintTree::Neg { child } => child.visit(f),
            _ => {}
        }
    }

    fn slot(e: &[f64], slot: usize) -> Result<f64> {
        e.get(slot).copied().ok_or(Error::SlotOutOfRange {
            slot,
            n_env: e.len(),
        })
    }

    fn state(x: &[f64], dim: usize) -> Result<f64> {
        x.get(dim).copied().ok_or(Error::Shape {
            what: "state (constraint dim)",
            expected: dim + 1,
            actual: x.len(),
        })
    }

    /// Exact value with hard min/max.
    pub fn eval(&self, x: &[f64], e: &[f64]) -> Result<f64> {
        match self {
            ConstraintTree::CircleKeepout {
                center_slots,
                radius_slot,
                position_dims,
            } => {
                let mut d2 = 0.0;
                for (&slot, &dim) in center_slots.iter().zip(position_dims) {
                    let diff = Self::state(x, dim)? - Self::slot(e, slot)?;
                    d2 += diff * diff;
                }
                let r = Self::slot(e, *radius_slot)?;
                Ok(d2 - r * r)
            }
            ConstraintTree::HalfspaceLower { dim, bound } => Ok(Self::state(x, *dim)? - bound),
            ConstraintTree::HalfspaceUpper { dim, bound } => Ok(bound - Self::state(x, *dim)?),
            ConstraintTree::Min { children } => children
                .iter()
                .try_fold(f64::INFINITY, |acc, c| Ok(acc.min(c.eval(x, e)?))),
            ConstraintTree::Max { children } => children
                .iter()
                .try_fold(f64::NEG_INFINITY, |acc, c| Ok(acc.max(c.eval(x, e)?))),
            ConstraintTree::Neg { child } => Ok(-child.eval(x, e)?),
        }
    }

    /// Smooth lower bound `c̲(x, e)`.
    pub fn eval_smooth_lower(&self, x: &[f64], e: &[f64], beta: f64) -> Result<f64> {
        Ok(self.smooth_bounds(x, e, beta)?.lower)
    }

    /// Smooth lower bound together with its gradient over `(x, e)`; the
    /// returned vector has length `x.len() + e.len()`.
    pub fn smooth_lower_with_gradient(
        &self,
        x: &[f64],
        e: &[f64],
        beta: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let b = self.smooth_bounds(x, e, beta)?;
        Ok((b.lower, b.d_lower))
    }

    fn smooth_bounds(&self, x: &[f64], e: &[f64], beta: f64) -> Result<Bounds> {
        if !(beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        let n = x.len();
        let dim = n + e.len();
        let leaf = |value: f64, grad: Vec<f64>| Bounds {
            lower: value,
            upper: value,
            d_lower: grad.clone(),
            d_upper: grad,
        };
        match self {
            ConstraintTree::CircleKeepout {
                center_slots,
                radius_slot,
                position_dims,
            } => {
                let mut grad = vec![0.0; dim];
                let mut d2 = 0.0;
                for (&slot, &pd) in center_slots.iter().zip(position_dims) {
                    let diff = Self::state(x, pd)? - Self::slot(e, slot)?;
                    d2 += diff * diff;
                    grad[pd] += 2.0 * diff;
                    grad[n + slot] -= 2.0 * diff;
                }
                let r = Self::slot(e, *radius_slot)?;
                grad[n + radius_slot] -= 2.0 * r;
                Ok(leaf(d2 - r * r, grad))
            }
            ConstraintTree::HalfspaceLower { dim: d, bound } => {
                let mut grad = vec![0.0; dim];
                grad[*d] = 1.0;
                Ok(leaf(Self::state(x, *d)? - bound, grad))
            }
            ConstraintTree::HalfspaceUpper { dim: d, bound } => {
                let mut grad = vec![0.0; dim];
                grad[*d] = -1.0;
                Ok(leaf(bound - Self::state(x, *d)?, grad))
            }
            ConstraintTree::Neg { child } => {
                let b = child.smooth_bounds(x, e, beta)?;
                Ok(Bounds {
                    lower: -b.upper,
                    upper: -b.lower,
                    d_lower: b.d_upper.iter().map(|v| -v).collect(),
                    d_upper: b.d_lower.iter().map(|v| -v).collect(),
                })
            }
            ConstraintTree::Max { children } => {
                let kids = children
                    .iter()
                    .map(|c| c.smooth_bounds(x, e, beta))
                    .collect::<Result<Vec<_>>>()?;
                let correction = (kids.len() as f64).ln() / beta;
                let (lo, d_lo) = lse_node(&kids, beta, |b| (b.lower, &b.d_lower), 1.0);
                let (up, d_up) = lse_node(&kids, beta, |b| (b.upper, &b.d_upper), 1.0);
                Ok(Bounds {
                    lower: lo - correction,
                    upper: up,
                    d_lower: d_lo,
                    d_upper: d_up,
                })
            }
            ConstraintTree::Min { children } => {
                let kids = children
                    .iter()
                    .map(|c| c.smooth_bounds(x, e, beta))
                    .collect::<Result<Vec<_>>>()?;
                let correction = (kids.len() as f64).ln() / beta;
                let (lo, d_lo) = lse_node(&kids, beta, |b| (b.lower, &b.d_lower), -1.0);
                let (up, d_up) = lse_node(&kids, beta, |b| (b.upper, &b.d_upper), -1.0);
                Ok(Bounds {
                    lower: lo,
                    upper: up + correction,
                    d_lower: d_lo,
                    d_upper: d_up,
                })
            }
        }
    }
}

/// `sign · LSE(sign · v; β)` over the selected child values, with the
/// softmax-weighted gradient.
fn lse_node<'a, F>(kids: &'a [Bounds], beta: f64, pick: F, sign: f64) -> (f64, Vec<f64>)
where
    F: Fn(&'a Bounds) -> (f64, &'a Vec<f64>),
{
    let values: Vec<f64> = kids.iter().map(|k| sign * pick(k).0).collect();
    let (value, weights) = lse_with_weights(&values, beta);
    let dim = pick(&kids[0]).1.len();
    let mut grad = vec![0.0; dim];
    for (k, w) in kids.iter().zip(&weights) {
        for (g, d) in grad.iter_mut().zip(pick(k).1) {
            *g += w * d;
        }
    }
    (sign * value, grad)
}

/// `(1/β) log Σ exp(β yᵢ)`, shifted by the max so large inputs do not overflow.
pub fn lse(values: &[f64], beta: f64) -> f64 {
    assert!(!values.is_empty(), "lse of an empty vector");
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|&v| (beta * (v - max)).exp()).sum();
    max + sum.ln() / beta
}

/// LSE value and its gradient (the softmax weights).
pub fn lse_with_weights(values: &[f64], beta: f64) -> (f64, Vec<f64>) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| (beta * (v - max)).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (
        max + sum.ln() / beta,
        exps.into_iter().map(|v| v / sum).collect(),
    )
}

/// Per-slot uniform ranges for environment parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnvDistribution {
    pub ranges: Vec<[f64; 2]>,
}

impl EnvDistribution {
    pub fn new(ranges: Vec<[f64; 2]>) -> Result<Self> {
        let d = Self { ranges };
        d.validate()?;
        Ok(d)
    }

    /// A distribution collapsed onto a single parameter vector.
    pub fn fixed(e: &[f64]) -> Self {
        Self {
            ranges: e.iter().map(|&v| [v, v]).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.ranges.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.as_box().validate("environment range").map(|_| ())
    }

    pub fn as_box(&self) -> BoxBounds {
        BoxBounds {
            lower: self.ranges.iter().map(|r| r[0]).collect(),
            upper: self.ranges.iter().map(|r| r[1]).collect(),
        }
    }

    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<EnvParams>> {
        self.validate()?;
        if count == 0 {
            return Err(Error::Config("environment count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bounds = self.as_box();
        Ok((0..count).map(|_| EnvParams(bounds.sample(&mut rng))).collect())
    }
}

/// Draws `count` environments, deterministically per `seed`.
pub fn sample_environments(
    dist: &EnvDistribution,
    count: usize,
    seed: u64,
) -> Result<Vec<EnvParams>> {
    dist.sample(count, seed)
}

/// The safe box `[0,10] × [−5,5]` on state dims 0 and 1.
pub fn arena_box() -> Vec<ConstraintTree> {
    ConstraintTree::rectangle([0, 1], [[0.0, 10.0], [-5.0, 5.0]])
}

/// An environment definition: tree plus parameter distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub tree: ConstraintTree,
    pub distribution: EnvDistribution,
}

impl Environment {
    pub fn env_dim(&self) -> usize {
        self.distribution.dim()
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        self.distribution.validate()?;
        self.tree.validate(state_dim, self.env_dim())?;
        for slot in self.tree.radius_slots() {
            if !(self.distribution.ranges[slot][0] > 0.0) {
                return Err(Error::Config(format!(
                    "radius slot {slot} must have a positive range"
                )));
            }
        }
        Ok(())
    }

    /// Named presets shipped with the toolkit.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "arena" => Ok(Self::arena()),
            "arena_two_circles" => Ok(Self::arena_two_circles()),
            "arena_one_circle" => Ok(Self::arena_one_circle()),
            other => Err(Error::Config(format!("unknown environment preset `{other}`"))),
        }
    }

    /// Obstacle-free safe box, no parameters.
    pub fn arena() -> Self {
        Self {
            tree: ConstraintTree::min(arena_box()),
            distribution: EnvDistribution { ranges: vec![] },
        }
    }

    /// Safe box with two circular keepouts in the plane of state dims 0, 1.
    /// Layout `e = [r₁, c₁₀, c₁₁, r₂, c₂₀, c₂₁]`; radii in `[1, 2]`, centers
    /// uniform over the safe box.
    pub fn arena_two_circles() -> Self {
        let mut children = arena_box();
        children.push(ConstraintTree::circle([1, 2], 0));
        children.push(ConstraintTree::circle([4, 5], 3));
        Self {
            tree: ConstraintTree::min(children),
            distribution: EnvDistribution {
                ranges: vec![
                    [1.0, 2.0],
                    [0.0, 10.0],
                    [-5.0, 5.0],
                    [1.0, 2.0],
                    [0.0, 10.0],
                    [-5.0, 5.0],
                ],
            },
        }
    }

    /// Safe box with one circular keepout, `e = [r, c₀, c₁]`.
    pub fn arena_one_circle() -> Self {
        let mut children = arena_box();
        children.push(ConstraintTree::circle([1, 2], 0));
        Self {
            tree: ConstraintTree::min(children),
            distribution: EnvDistribution {
                ranges: vec![[1.0, 2.0], [0.0, 10.0], [-5.0, 5.0]],
            },
        }
    }
}
