use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// `u = kp·(target − position) − kd·velocity`, unclamped.
pub fn pd_controller(state: &[f64], target: f64, kp: f64, kd: f64) -> f64 {
    kp * (target - state[0]) - kd * state[1]
}

/// Heading-error controller for the unicycle. The target error is rotated
/// into the body frame, `d = atan2(err_y, err_x)`, and the output is
/// `(v, ω) = (k_v cos d, k_ω d)`, unclamped. A target on top of the vehicle
/// gives `d = 0`.
pub fn unicycle_controller(state: &[f64], target: [f64; 2], k_omega: f64, k_v: f64) -> [f64; 2] {
    let (s, c) = state[2].sin_cos();
    let dx = target[0] - state[0];
    let dy = target[1] - state[1];
    let ex = c * dx + s * dy;
    let ey = -s * dx + c * dy;
    let d = if ex == 0.0 && ey == 0.0 {
        0.0
    } else {
        ey.atan2(ex)
    };
    [k_v * d.cos(), k_omega * d]
}

/// Reference controllers selectable from scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceController {
    /// Position-velocity PD; `target` is a position.
    Pd {
        #[serde(default = "default_kp")]
        kp: f64,
        #[serde(default = "default_kd")]
        kd: f64,
    },
    Unicycle {
        #[serde(default = "default_k_omega")]
        k_omega: f64,
        #[serde(default = "default_k_v")]
        k_v: f64,
    },
}

fn default_kp() -> f64 {
    1.0
}
fn default_kd() -> f64 {
    2.0
}
fn default_k_omega() -> f64 {
    2.0
}
fn default_k_v() -> f64 {
    1.0
}

impl ReferenceController {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ReferenceController::Pd { kp, kd } => kp >= 0.0 && kd >= 0.0,
            ReferenceController::Unicycle { k_omega, k_v } => k_omega > 0.0 && k_v > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid controller gains: {self:?}")))
        }
    }

    /// Number of target coordinates the controller expects.
    pub fn target_dim(&self) -> usize {
        match self {
            ReferenceController::Pd { .. } => 1,
            ReferenceController::Unicycle { .. } => 2,
        }
    }

    pub fn compute(&self, state: &[f64], target: &[f64]) -> Result<Vec<f64>> {
        check_len("controller target", self.target_dim(), target.len())?;
        Ok(match *self {
            ReferenceController::Pd { kp, kd } => {
                check_len("pd state", 2, state.len())?;
                vec![pd_controller(state, target[0], kp, kd)]
            }
            ReferenceController::Unicycle { k_omega, k_v } => {
                check_len("unicycle state", 3, state.len())?;
                unicycle_controller(state, [target[0], target[1]], k_omega, k_v).to_vec()
            }
        })
    }
}
