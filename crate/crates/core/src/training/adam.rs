use serde::{Deserialize, Serialize};

use crate::network::{MlpParams, ParamGradient};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamGradient,
    pub v: ParamGradient,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let zeros = ParamGradient {
            layers: params
                .layers
                .iter()
                .map(|l| crate::network::Layer {
                    weights: ndarray::Array2::zeros(l.weights.dim()),
                    bias: ndarray::Array1::zeros(l.bias.len()),
                })
                .collect(),
        };
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected update applied in place.
    pub(crate) fn apply(&mut self, params: &mut MlpParams, grad: &ParamGradient, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.eps);
        for (((p, g), m), v) in params
            .layers
            .iter_mut()
            .zip(&grad.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            };
            ndarray::Zip::from(&mut p.weights)
                .and(&g.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

/// Functional form of one ADAM step.
pub fn adam_step(
    mut state: AdamState,
    mut params: MlpParams,
    grad: &ParamGradient,
    config: &AdamConfig,
) -> (AdamState, MlpParams) {
    state.apply(&mut params, grad, config);
    (state, params)
}
