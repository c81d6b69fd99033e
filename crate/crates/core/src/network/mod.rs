//! The difference network `δ_θ`, the constrained operator `h_θ = c̲ − δ_θ`,
//! and the derivatives needed to train it.
//!
//! `δ_θ` is a tanh MLP with a softplus head evaluated on the normalized joint
//! state `ξ = (x, e)`. Because the training loss contains `∇ₓ h_θ`, parameter
//! gradients are nested derivatives; [`tape`] computes them by pushing `n`
//! forward tangent channels through the network and then running a reverse
//! pass over primal and tangent values together.

pub mod checkpoint;
mod tape;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::BoxBounds;
use crate::environment::{ConstraintTree, DEFAULT_BETA};
use crate::error::{check_len, Error, Result};

pub use checkpoint::{CbfOperator, CHECKPOINT_FORMAT};
pub(crate) use checkpoint::write_atomic;
pub use tape::{loss_param_gradient, LossGradient, LossSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `n + n_e`.
    pub input_dim: usize,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    #[serde(default = "default_hidden_activation")]
    pub hidden_activation: HiddenActivation,
    #[serde(default = "default_output_activation")]
    pub output_activation: OutputActivation,
    /// Slope of the linear class-K function `α(h) = γh`.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Weight of the CBF-condition penalty.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// LSE sharpness for the smooth constraint bound.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Angle inputs, fed to the network as `(cos, sin)` instead of through
    /// the normalizer. Strictly increasing.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub periodic_inputs: Vec<usize>,
}

fn default_hidden_layers() -> usize {
    4
}
fn default_hidden_width() -> usize {
    50
}
fn default_hidden_activation() -> HiddenActivation {
    HiddenActivation::Tanh
}
fn default_output_activation() -> OutputActivation {
    OutputActivation::Softplus
}
fn default_gamma() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}

impl ModelConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_layers: default_hidden_layers(),
            hidden_width: default_hidden_width(),
            hidden_activation: HiddenActivation::Tanh,
            output_activation: OutputActivation::Softplus,
            gamma: default_gamma(),
            lambda: default_lambda(),
            beta: default_beta(),
            periodic_inputs: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        let p = &self.periodic_inputs;
        if p.windows(2).any(|w| w[0] >= w[1]) || p.last().is_some_and(|&i| i >= self.input_dim) {
            return Err(Error::Config(format!(
                "periodic_inputs {p:?} must be increasing and below {}",
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Width of the first layer's input: one extra feature per angle.
    pub fn feature_dim(&self) -> usize {
        self.input_dim + self.periodic_inputs.len()
    }

    /// `(fan_out, fan_in)` for each linear layer, input first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.feature_dim();
        for _ in 0..self.hidden_layers {
            shapes.push((self.hidden_width, fan_in));
            fan_in = self.hidden_width;
        }
        shapes.push((1, fan_in));
        shapes
    }
}

/// Affine map sending each input coordinate's range to `[−1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNormalizer {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl InputNormalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            scale: vec![1.0; dim],
            offset: vec![0.0; dim],
        }
    }

    /// Degenerate ranges are centered at zero with unit scale.
    pub fn from_box(bounds: &BoxBounds) -> Self {
        let (scale, offset) = bounds
            .lower
            .iter()
            .zip(&bounds.upper)
            .map(|(&lo, &hi)| {
                if hi > lo {
                    let s = 2.0 / (hi - lo);
                    (s, -(hi + lo) / (hi - lo))
                } else {
                    (1.0, -lo)
                }
            })
            .unzip();
        Self { scale, offset }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }
}

/// One affine layer, `weights` is `fan_out × fan_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            weights: Array2::zeros((rows, cols)),
            bias: Array1::zeros(rows),
        }
    }
}

/// Weights and biases of `δ_θ`, input layer first.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Gradient of a scalar loss, shaped like [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub layers: Vec<Layer>,
}

macro_rules! flat_access {
    ($t:ty) => {
        impl $t {
            pub fn zeros(config: &ModelConfig) -> Self {
                Self {
                    layers: config
                        .layer_shapes()
                        .into_iter()
                        .map(|(r, c)| Layer::zeros(r, c))
                        .collect(),
                }
            }

            pub fn num_params(&self) -> usize {
                self.layers
                    .iter()
                    .map(|l| l.weights.len() + l.bias.len())
                    .sum()
            }

            /// All coordinates, layer by layer, weights (row-major) then bias.
            pub fn to_flat(&self) -> Vec<f64> {
                let mut out = Vec::with_capacity(self.num_params());
                for l in &self.layers {
                    out.extend(l.weights.iter());
                    out.extend(l.bias.iter());
                }
                out
            }

            pub fn set_flat(&mut self, flat: &[f64]) {
                assert_eq!(flat.len(), self.num_params());
                let mut it = flat.iter();
                for l in &mut self.layers {
                    for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                        *w = *it.next().unwrap();
                    }
                }
            }

            pub fn shapes(&self) -> Vec<(usize, usize)> {
                self.layers.iter().map(|l| l.weights.dim()).collect()
            }
        }
    };
}

flat_access!(MlpParams);
flat_access!(ParamGradient);

impl ParamGradient {
    pub(crate) fn add_assign(&mut self, other: &ParamGradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Glorot-uniform weights, zero biases, deterministic per seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<MlpParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MlpParams::zeros(config);
    for layer in &mut params.layers {
        let (fan_out, fan_in) = layer.weights.dim();
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in layer.weights.iter_mut() {
            *w = rng.random_range(-limit..=limit);
        }
    }
    Ok(params)
}

pub(crate) fn softplus(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let z = a.exp();
        z / (1.0 + z)
    }
}

/// `δ_θ` together with its normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct CbfModel {
    pub config: ModelConfig,
    pub normalizer: InputNormalizer,
    pub params: MlpParams,
}

impl CbfModel {
    pub fn new(config: ModelConfig, normalizer: InputNormalizer, params: MlpParams) -> Result<Self> {
        config.validate()?;
        check_len("normalizer", config.input_dim, normalizer.dim())?;
        if params.shapes() != config.layer_shapes() {
            return Err(Error::Config(format!(
                "parameter shapes {:?} do not match config {:?}",
                params.shapes(),
                config.layer_shapes()
            )));
        }
        Ok(Self {
            config,
            normalizer,
            params,
        })
    }

    /// All-zero weights: `δ ≡ softplus(0) = ln 2`.
    pub fn zeros(config: ModelConfig, normalizer: InputNormalizer) -> Result<Self> {
        let params = MlpParams::zeros(&config);
        Self::new(config, normalizer, params)
    }

    /// `δ_θ(ξ)`.
    pub fn delta_forward(&self, xi: &[f64]) -> Result<f64> {
        check_len("joint state", self.config.input_dim, xi.len())?;
        let batch = ArrayView2::from_shape((1, xi.len()), xi).expect("row view");
        let out = tape::forward(self, batch, 0);
        Ok(out.delta[0])
    }

    /// `δ_θ(ξ)` and its gradient with respect to the first `dirs` inputs.
    pub fn delta_with_gradient(&self, xi: &[f64], dirs: usize) -> Result<(f64, Vec<f64>)> {
        check_len("joint state", self.config.input_dim, xi.len())?;
        let batch = ArrayView2::from_shape((1, xi.len()), xi).expect("row view");
        let out = tape::forward(self, batch, dirs);
        Ok((out.delta[0], out.delta_grad.row(0).to_vec()))
    }

    /// `δ_θ` over a batch of joint states (rows).
    pub fn delta_batch(&self, xi: ArrayView2<f64>) -> Result<Vec<f64>> {
        check_len("joint state", self.config.input_dim, xi.ncols())?;
        Ok(tape::forward(self, xi, 0).delta)
    }

    fn joint(&self, x: &[f64], e: &[f64]) -> Result<Vec<f64>> {
        check_len("joint state", self.config.input_dim, x.len() + e.len())?;
        Ok(x.iter().chain(e).copied().collect())
    }

    /// `h_θ(x, e) = c̲(x, e) − δ_θ(x, e)` with the model's `β`.
    pub fn h_forward(&self, tree: &ConstraintTree, x: &[f64], e: &[f64]) -> Result<f64> {
        let xi = self.joint(x, e)?;
        let c_lower = tree.eval_smooth_lower(x, e, self.config.beta)?;
        Ok(c_lower - self.delta_forward(&xi)?)
    }

    /// `∇ₓ h_θ(x, e)`.
    pub fn h_gradient_x(&self, tree: &ConstraintTree, x: &[f64], e: &[f64]) -> Result<Vec<f64>> {
        Ok(self.h_value_and_gradient_x(tree, x, e)?.1)
    }

    pub fn h_value_and_gradient_x(
        &self,
        tree: &ConstraintTree,
        x: &[f64],
        e: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let xi = self.joint(x, e)?;
        let n = x.len();
        let (c_lower, dc) = tree.smooth_lower_with_gradient(x, e, self.config.beta)?;
        let (delta, ddelta) = self.delta_with_gradient(&xi, n)?;
        let grad = (0..n).map(|i| dc[i] - ddelta[i]).collect();
        Ok((c_lower - delta, grad))
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;
    use crate::environment::Environment;

    const LN2: f64 = std::f64::consts::LN_2;

    fn small_config(input_dim: usize, width: usize) -> ModelConfig {
        ModelConfig {
            hidden_layers: 2,
            hidden_width: width,
            ..ModelConfig::new(input_dim)
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let config = ModelConfig::new(4);
        let a = init_params(&config, 7).unwrap();
        let b = init_params(&config, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&config, 8).unwrap());
        assert_eq!(a.layers[0].weights.dim(), (50, 4));
        assert_eq!(a.layers[0].bias.len(), 50);
        assert_eq!(a.layers.len(), 5);
        assert_eq!(a.layers[4].weights.dim(), (1, 50));
        let limit = (6.0f64 / 54.0).sqrt();
        assert!(a.layers[0].weights.iter().all(|w| w.abs() <= limit));
        assert!(a.layers[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_network_is_ln2() {
        let model = CbfModel::zeros(ModelConfig::new(3), InputNormalizer::identity(3)).unwrap();
        for xi in [[0.0, 0.0, 0.0], [4.0, -2.0, 9.0]] {
            assert!((model.delta_forward(&xi).unwrap() - LN2).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_two_neuron_forward() {
        // One hidden layer of two tanh units: W₀ = I, b₀ = (0.5, −0.25),
        // head W₁ = (1, 1), b₁ = 0.1, evaluated at ξ = (0.3, −0.2).
        let config = ModelConfig {
            hidden_layers: 1,
            hidden_width: 2,
            ..ModelConfig::new(2)
        };
        let params = MlpParams {
            layers: vec![
                Layer {
                    weights: array![[1.0, 0.0], [0.0, 1.0]],
                    bias: array![0.5, -0.25],
                },
                Layer {
                    weights: array![[1.0, 1.0]],
                    bias: array![0.1],
                },
            ],
        };
        let model = CbfModel::new(config, InputNormalizer::identity(2), params).unwrap();
        let z = (0.8f64).tanh() + (-0.45f64).tanh() + 0.1;
        let expected = (1.0 + z.exp()).ln();
        let got = model.delta_forward(&[0.3, -0.2]).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.878_777_528_510_407).abs() < 1e-12);

        let (_, grad) = model.delta_with_gradient(&[0.3, -0.2], 2).unwrap();
        let s = 1.0 / (1.0 + (-z).exp());
        let d0 = s * (1.0 - (0.8f64).tanh().powi(2));
        let d1 = s * (1.0 - (0.45f64).tanh().powi(2));
        assert!((grad[0] - d0).abs() < 1e-15 && (grad[1] - d1).abs() < 1e-15);
    }

    #[test]
    fn delta_is_nonnegative() {
        let config = small_config(3, 8);
        let mut params = init_params(&config, 1).unwrap();
        for l in &mut params.layers {
            l.weights *= 6.0;
        }
        let model = CbfModel::new(config, InputNormalizer::identity(3), params).unwrap();
        for i in 0..50 {
            let t = i as f64 * 0.37 - 9.0;
            assert!(model.delta_forward(&[t, -t, 0.5 * t]).unwrap() >= 0.0);
        }
    }

    #[test]
    fn h_forward_examples() {
        let env = Environment::arena_two_circles();
        let config = ModelConfig::new(8);
        let zero = CbfModel::zeros(config.clone(), InputNormalizer::identity(8)).unwrap();
        let x = [5.0, 0.0];
        let e = [1.0, 1.0, 3.0, 1.5, 8.0, -3.0];
        let c_lower = env.tree.eval_smooth_lower(&x, &e, config.beta).unwrap();
        assert_eq!(zero.h_forward(&env.tree, &x, &e).unwrap(), c_lower - LN2);

        let trained = CbfModel::new(
            config.clone(),
            InputNormalizer::identity(8),
            init_params(&config, 3).unwrap(),
        )
        .unwrap();
        let h = trained.h_forward(&env.tree, &x, &e).unwrap();
        assert!(h <= env.tree.eval(&x, &e).unwrap());
    }

    #[test]
    fn h_gradient_of_zero_net_on_circle() {
        let tree = ConstraintTree::circle([0, 1], 2);
        let model = CbfModel::zeros(ModelConfig::new(5), InputNormalizer::identity(5)).unwrap();
        let g = model.h_gradient_x(&tree, &[2.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(g, vec![4.0, 0.0]);
    }

    #[test]
    fn h_gradient_follows_dominant_min_branch() {
        // Branch values 3 (circle) and 8 (halfspace): softmax weight on the
        // circle is 1/(1 + e^{−50}) at β = 10.
        let tree = ConstraintTree::min(vec![
            ConstraintTree::circle([0, 1], 2),
            ConstraintTree::HalfspaceUpper {
                dim: 0,
                bound: 10.0,
            },
        ]);
        let model = CbfModel::zeros(ModelConfig::new(5), InputNormalizer::identity(5)).unwrap();
        let g = model.h_gradient_x(&tree, &[2.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-6 * 5.0);
        assert!(g[1].abs() < 1e-12);
    }

    #[test]
    fn h_gradient_matches_central_differences() {
        let env = Environment::arena_two_circles();
        let config = small_config(8, 8);
        let bounds = BoxBounds::from_pairs(&[[-1.0, 11.0], [-6.0, 6.0]])
            .unwrap()
            .concat(&env.distribution.as_box());
        let model = CbfModel::new(
            config.clone(),
            InputNormalizer::from_box(&bounds),
            init_params(&config, 5).unwrap(),
        )
        .unwrap();
        let e = [1.2, 3.0, 1.0, 1.7, 7.0, -2.0];
        for x in [[1.0, 1.0], [4.5, 0.2], [8.0, -3.3]] {
            let g = model.h_gradient_x(&env.tree, &x, &e).unwrap();
            for i in 0..2 {
                let step = 1e-5;
                let mut up = x;
                up[i] += step;
                let mut down = x;
                down[i] -= step;
                let fd = (model.h_forward(&env.tree, &up, &e).unwrap()
                    - model.h_forward(&env.tree, &down, &e).unwrap())
                    / (2.0 * step);
                assert!((fd - g[i]).abs() / g[i].abs().max(1.0) < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let model = CbfModel::zeros(ModelConfig::new(3), InputNormalizer::identity(3)).unwrap();
        assert!(model.delta_forward(&[1.0, 2.0]).is_err());
        let bad = CbfModel::new(
            ModelConfig::new(3),
            InputNormalizer::identity(3),
            MlpParams::zeros(&ModelConfig::new(4)),
        );
        assert!(bad.is_err());
    }
}
