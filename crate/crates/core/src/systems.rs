//! Control-affine dynamics `ẋ = f(x) + g(x)u` with box-constrained inputs.
//!
//! Each builtin system provides its drift and actuation in closed form. The
//! input-maximized Hamiltonian `max_{u∈U} pᵀ(f + g u)` is separable over input
//! coordinates for a box, so it is evaluated exactly by picking, per column of
//! `g`, whichever bound matches the sign of `pᵀg_j`.

use serde::{Deserialize, Serialize};

use crate::bounds::BoxBounds;
use crate::error::{check_finite, check_len, Error, Result};

/// Tolerance used when checking that an input lies in the box.
pub const INPUT_TOL: f64 = 1e-9;

/// `|pᵀg_j|` below this counts as a tie and resolves to the lower bound.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum BuiltinSystem {
    /// `(ẋ, v̇) = (v, u)`.
    DoubleIntegrator,
    /// `(ẋ, ẏ, ψ̇) = (v cosψ, v sinψ, ω)` with input `(v, ω)`.
    Unicycle,
    /// Constant-speed car: `(ẋ, ẏ, ψ̇) = (V cosψ, V sinψ, u)`.
    #[serde(rename = "dubins")]
    DubinsCar { speed: f64 },
}

impl BuiltinSystem {
    pub fn state_dim(&self) -> usize {
        match self {
            BuiltinSystem::DoubleIntegrator => 2,
            BuiltinSystem::Unicycle | BuiltinSystem::DubinsCar { .. } => 3,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            BuiltinSystem::DoubleIntegrator | BuiltinSystem::DubinsCar { .. } => 1,
            BuiltinSystem::Unicycle => 2,
        }
    }

    /// State coordinates that are angles.
    pub fn periodic_dims(&self) -> Vec<usize> {
        match self {
            BuiltinSystem::DoubleIntegrator => vec![],
            BuiltinSystem::Unicycle | BuiltinSystem::DubinsCar { .. } => vec![2],
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            BuiltinSystem::DoubleIntegrator => "double_integrator",
            BuiltinSystem::Unicycle => "unicycle",
            BuiltinSystem::DubinsCar { .. } => "dubins",
        }
    }

    fn default_inputs(&self) -> BoxBounds {
        match self {
            BuiltinSystem::DoubleIntegrator | BuiltinSystem::DubinsCar { .. } => BoxBounds {
                lower: vec![-1.0],
                upper: vec![1.0],
            },
            BuiltinSystem::Unicycle => BoxBounds {
                lower: vec![0.2, -1.0],
                upper: vec![2.0, 1.0],
            },
        }
    }

    fn default_domain(&self) -> BoxBounds {
        use std::f64::consts::PI;
        match self {
            BuiltinSystem::DoubleIntegrator => BoxBounds {
                lower: vec![-1.0, -6.0],
                upper: vec![11.0, 6.0],
            },
            BuiltinSystem::Unicycle | BuiltinSystem::DubinsCar { .. } => BoxBounds {
                lower: vec![-1.0, -6.0, -PI],
                upper: vec![11.0, 6.0, PI],
            },
        }
    }
}

/// Description of a system as it appears in run configs and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    #[serde(flatten)]
    pub kind: BuiltinSystem,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<BoxBounds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_domain: Option<BoxBounds>,
}

impl SystemSpec {
    pub fn build(&self) -> Result<ControlAffineSystem> {
        ControlAffineSystem::new(
            self.kind,
            self.inputs.clone().unwrap_or_else(|| self.kind.default_inputs()),
            self.state_domain
                .clone()
                .unwrap_or_else(|| self.kind.default_domain()),
        )
    }
}

impl From<BuiltinSystem> for SystemSpec {
    fn from(kind: BuiltinSystem) -> Self {
        SystemSpec {
            kind,
            inputs: None,
            state_domain: None,
        }
    }
}

/// Result of maximizing the Hamiltonian over the input box.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianMax {
    pub value: f64,
    /// Maximizing box vertex.
    pub u_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlAffineSystem {
    kind: BuiltinSystem,
    inputs: BoxBounds,
    state_domain: BoxBounds,
}

impl ControlAffineSystem {
    pub fn new(kind: BuiltinSystem, inputs: BoxBounds, state_domain: BoxBounds) -> Result<Self> {
        inputs.validate("input box")?;
        state_domain.validate("state domain")?;
        check_len("input box", kind.input_dim(), inputs.dim())?;
        check_len("state domain", kind.state_dim(), state_domain.dim())?;
        if let BuiltinSystem::DubinsCar { speed } = kind {
            if !speed.is_finite() {
                return Err(Error::Config("dubins speed must be finite".into()));
            }
        }
        Ok(Self {
            kind,
            inputs,
            state_domain,
        })
    }

    pub fn double_integrator() -> Self {
        SystemSpec::from(BuiltinSystem::DoubleIntegrator)
            .build()
            .expect("builtin system is valid")
    }

    pub fn unicycle() -> Self {
        SystemSpec::from(BuiltinSystem::Unicycle)
            .build()
            .expect("builtin system is valid")
    }

    /// Dubins car with turn-rate input in `[-1, 1]`.
    pub fn dubins(speed: f64) -> Result<Self> {
        SystemSpec::from(BuiltinSystem::DubinsCar { speed }).build()
    }

    /// Looks up a builtin by its config name. Dubins needs a speed.
    pub fn from_name(name: &str, speed: Option<f64>) -> Result<Self> {
        match (name, speed) {
            ("double_integrator", _) => Ok(Self::double_integrator()),
            ("unicycle", _) => Ok(Self::unicycle()),
            ("dubins", Some(v)) => Self::dubins(v),
            ("dubins", None) => Err(Error::Config("dubins requires a speed".into())),
            (other, _) => Err(Error::Config(format!("unknown system `{other}`"))),
        }
    }

    pub fn spec(&self) -> SystemSpec {
        SystemSpec {
            kind: self.kind,
            inputs: Some(self.inputs.clone()),
            state_domain: Some(self.state_domain.clone()),
        }
    }

    pub fn kind(&self) -> BuiltinSystem {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.label()
    }

    pub fn state_dim(&self) -> usize {
        self.kind.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.kind.input_dim()
    }

    pub fn inputs(&self) -> &BoxBounds {
        &self.inputs
    }

    pub fn state_domain(&self) -> &BoxBounds {
        &self.state_domain
    }

    /// Drift `f(x)`.
    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            BuiltinSystem::DoubleIntegrator => vec![x[1], 0.0],
            BuiltinSystem::Unicycle => vec![0.0; 3],
            BuiltinSystem::DubinsCar { speed } => {
                vec![speed * x[2].cos(), speed * x[2].sin(), 0.0]
            }
        }
    }

    /// Actuation `g(x)` as a row-major `n × m` matrix.
    pub fn actuation(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            BuiltinSystem::DoubleIntegrator => vec![0.0, 1.0],
            BuiltinSystem::Unicycle => {
                let (s, c) = x[2].sin_cos();
                vec![c, 0.0, s, 0.0, 0.0, 1.0]
            }
            BuiltinSystem::DubinsCar { .. } => vec![0.0, 0.0, 1.0],
        }
    }

    /// `f(x) + g(x)u`, without validating `u`.
    pub(crate) fn rate(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let m = self.input_dim();
        let mut rate = self.drift(x);
        let g = self.actuation(x);
        for (i, r) in rate.iter_mut().enumerate() {
            *r += (0..m).map(|j| g[i * m + j] * u[j]).sum::<f64>();
        }
        rate
    }

    pub fn eval_dynamics(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_len("state", self.state_dim(), x.len())?;
        check_len("input", self.input_dim(), u.len())?;
        check_finite("state", x)?;
        self.check_input(u)?;
        Ok(self.rate(x, u))
    }

    pub fn check_input(&self, u: &[f64]) -> Result<()> {
        for (index, (&value, (&lower, &upper))) in u
            .iter()
            .zip(self.inputs.lower.iter().zip(&self.inputs.upper))
            .enumerate()
        {
            if !(value >= lower - INPUT_TOL && value <= upper + INPUT_TOL) {
                return Err(Error::InputOutOfBounds {
                    index,
                    value,
                    lower,
                    upper,
                });
            }
        }
        Ok(())
    }

    pub fn hamiltonian_max(&self, x: &[f64], p: &[f64]) -> Result<HamiltonianMax> {
        check_len("state", self.state_dim(), x.len())?;
        check_len("costate", self.state_dim(), p.len())?;
        check_finite("state", x)?;
        check_finite("costate", p)?;
        let out = self.hamiltonian_max_unchecked(x, p);
        if !out.value.is_finite() {
            return Err(Error::NonFinite {
                what: "hamiltonian",
            });
        }
        Ok(out)
    }

    pub(crate) fn hamiltonian_max_unchecked(&self, x: &[f64], p: &[f64]) -> HamiltonianMax {
        let m = self.input_dim();
        let f = self.drift(x);
        let g = self.actuation(x);
        let mut value: f64 = p.iter().zip(&f).map(|(a, b)| a * b).sum();
        let mut u_star = Vec::with_capacity(m);
        for j in 0..m {
            let pg: f64 = p.iter().enumerate().map(|(i, &pi)| pi * g[i * m + j]).sum();
            let u = if pg > TIE_TOL {
                self.inputs.upper[j]
            } else if pg < -TIE_TOL {
                self.inputs.lower[j]
            } else {
                self.inputs.lower[j]
            };
            value += pg * u;
            u_star.push(u);
        }
        HamiltonianMax { value, u_star }
    }

    /// Classical RK4 step with `u` held constant over `dt`.
    pub fn rk4_step(&self, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Config(format!("step size must be positive, got {dt}")));
        }
        check_len("state", self.state_dim(), x.len())?;
        check_len("input", self.input_dim(), u.len())?;
        check_finite("state", x)?;
        self.check_input(u)?;

        let axpy = |a: f64, k: &[f64]| -> Vec<f64> {
            x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect()
        };
        let finite = |stage: usize, v: &[f64]| -> Result<()> {
            if v.iter().all(|z| z.is_finite()) {
                Ok(())
            } else {
                Err(Error::Integration { stage })
            }
        };

        let k1 = self.rate(x, u);
        finite(1, &k1)?;
        let k2 = self.rate(&axpy(0.5 * dt, &k1), u);
        finite(2, &k2)?;
        let k3 = self.rate(&axpy(0.5 * dt, &k2), u);
        finite(3, &k3)?;
        let k4 = self.rate(&axpy(dt, &k3), u);
        finite(4, &k4)?;

        let next: Vec<f64> = (0..x.len())
            .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        finite(5, &next)?;
        Ok(next)
    }
}
