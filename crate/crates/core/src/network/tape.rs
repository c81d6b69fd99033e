//! Batched forward-over-reverse differentiation of `δ_θ`.
//!
//! Activations are stored column-wise: for a batch of `B` samples and `k`
//! tangent directions every layer holds a `width × (k+1)·B` matrix whose
//! first `B` columns are primal values and whose `j`-th following block holds
//! the directional derivative along input `j`. One GEMM per layer therefore
//! advances primal and tangents together, and the reverse pass walks the same
//! matrices back to accumulate `∂loss/∂θ` for losses that depend on both `δ`
//! and `∇ₓδ`.

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{sigmoid, softplus, CbfModel, InputNormalizer, Layer, MlpParams, ParamGradient};
use crate::environment::ConstraintTree;
use crate::error::{check_len, Error, Result};
use crate::parallel;
use crate::systems::ControlAffineSystem;
use crate::training::losses::pde_terms;

/// Rows per work unit when a batch is split across workers.
const CHUNK_ROWS: usize = 256;

pub(crate) struct ForwardOutput {
    pub delta: Vec<f64>,
    /// `B × dirs`.
    pub delta_grad: Array2<f64>,
}

struct Tape {
    batch: usize,
    dirs: usize,
    /// Input of every layer; entry `k + 1` is the tanh output of layer `k`.
    inputs: Vec<Array2<f64>>,
    /// Tangent pre-activations `W ż` of every hidden layer, `width × dirs·B`.
    tangent_pre: Vec<Array2<f64>>,
    /// Output pre-activation, `1 × (dirs+1)·B`.
    out_pre: Array2<f64>,
}

fn run_forward(
    params: &MlpParams,
    normalizer: &InputNormalizer,
    periodic: &[usize],
    xi: ArrayView2<f64>,
    dirs: usize,
) -> Tape {
    let batch = xi.nrows();
    let dim = xi.ncols();
    let cols = (dirs + 1) * batch;
    let mut x0 = Array2::zeros((dim + periodic.len(), cols));
    for i in 0..dim {
        let (scale, offset) = (normalizer.scale[i], normalizer.offset[i]);
        for r in 0..batch {
            x0[[i, r]] = scale * xi[[r, i]] + offset;
        }
    }
    for j in 0..dirs {
        x0.slice_mut(s![j, (j + 1) * batch..(j + 2) * batch])
            .fill(normalizer.scale[j]);
    }
    // Angle `i` becomes feature rows `i` (cos) and `dim + k` (sin).
    for (k, &i) in periodic.iter().enumerate() {
        let sin_row = dim + k;
        for r in 0..batch {
            let (sn, cs) = xi[[r, i]].sin_cos();
            x0[[i, r]] = cs;
            x0[[sin_row, r]] = sn;
            if i < dirs {
                let col = (i + 1) * batch + r;
                x0[[i, col]] = -sn;
                x0[[sin_row, col]] = cs;
            }
        }
    }

    let hidden = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(hidden + 1);
    let mut tangent_pre = Vec::with_capacity(hidden);
    inputs.push(x0);
    for layer in &params.layers[..hidden] {
        let mut a = layer.weights.dot(inputs.last().unwrap());
        let width = a.nrows();
        let mut tan = Array2::zeros((width, dirs * batch));
        for (row, bias) in layer.bias.iter().enumerate() {
            let mut arow = a.row_mut(row);
            let arow = arow.as_slice_mut().expect("standard layout");
            let (prim, rest) = arow.split_at_mut(batch);
            tan.row_mut(row)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(rest);
            for p in prim.iter_mut() {
                *p = (*p + bias).tanh();
            }
            for block in rest.chunks_exact_mut(batch) {
                for (v, t) in block.iter_mut().zip(prim.iter()) {
                    *v *= 1.0 - t * t;
                }
            }
        }
        tangent_pre.push(tan);
        inputs.push(a);
    }
    let head = &params.layers[hidden];
    let mut out_pre = head.weights.dot(inputs.last().unwrap());
    out_pre
        .slice_mut(s![0, ..batch])
        .mapv_inplace(|v| v + head.bias[0]);
    Tape {
        batch,
        dirs,
        inputs,
        tangent_pre,
        out_pre,
    }
}

fn outputs(tape: &Tape) -> ForwardOutput {
    let (batch, dirs) = (tape.batch, tape.dirs);
    let a = tape.out_pre.row(0);
    let delta = (0..batch).map(|r| softplus(a[r])).collect();
    let mut delta_grad = Array2::zeros((batch, dirs));
    for r in 0..batch {
        let s = sigmoid(a[r]);
        for j in 0..dirs {
            delta_grad[[r, j]] = s * a[(j + 1) * batch + r];
        }
    }
    ForwardOutput { delta, delta_grad }
}

pub(crate) fn forward(model: &CbfModel, xi: ArrayView2<f64>, dirs: usize) -> ForwardOutput {
    outputs(&run_forward(
        &model.params,
        &model.normalizer,
        &model.config.periodic_inputs,
        xi,
        dirs,
    ))
}

/// Reverse pass given adjoints of `δ` (length `B`) and `∇δ` (`B × dirs`).
fn backward(
    tape: &Tape,
    params: &MlpParams,
    delta_bar: &[f64],
    grad_bar: &Array2<f64>,
) -> ParamGradient {
    let (batch, dirs) = (tape.batch, tape.dirs);
    let cols = (dirs + 1) * batch;
    let hidden = params.layers.len() - 1;
    let mut layers = Vec::with_capacity(hidden + 1);

    let a = tape.out_pre.row(0);
    let mut abar = Array2::zeros((1, cols));
    {
        let ab = abar.as_slice_mut().expect("standard layout");
        for r in 0..batch {
            let s = sigmoid(a[r]);
            let ds = s * (1.0 - s);
            let mut acc = delta_bar[r] * s;
            for j in 0..dirs {
                let idx = (j + 1) * batch + r;
                let gb = grad_bar[[r, j]];
                acc += gb * ds * a[idx];
                ab[idx] = gb * s;
            }
            ab[r] = acc;
        }
    }
    layers.push(Layer {
        weights: abar.dot(&tape.inputs[hidden].t()),
        bias: Array1::from_elem(1, abar.slice(s![0, ..batch]).sum()),
    });
    let mut xbar = params.layers[hidden].weights.t().dot(&abar);

    for k in (0..hidden).rev() {
        let z = &tape.inputs[k + 1];
        let tan = &tape.tangent_pre[k];
        for row in 0..z.nrows() {
            let zrow = z.row(row);
            let zrow = zrow.as_slice().expect("standard layout");
            let trow = tan.row(row);
            let trow = trow.as_slice().expect("standard layout");
            let mut xrow = xbar.row_mut(row);
            let xrow = xrow.as_slice_mut().expect("standard layout");
            for r in 0..batch {
                let t = zrow[r];
                let d = 1.0 - t * t;
                let curvature = -2.0 * t * d;
                let mut acc = xrow[r] * d;
                for j in 0..dirs {
                    let idx = (j + 1) * batch + r;
                    acc += xrow[idx] * trow[j * batch + r] * curvature;
                    xrow[idx] *= d;
                }
                xrow[r] = acc;
            }
        }
        let abar = xbar;
        let bias = abar.slice(s![.., ..batch]).sum_axis(ndarray::Axis(1));
        layers.push(Layer {
            weights: abar.dot(&tape.inputs[k].t()),
            bias,
        });
        xbar = if k > 0 {
            params.layers[k].weights.t().dot(&abar)
        } else {
            Array2::zeros((0, 0))
        };
    }
    layers.reverse();
    ParamGradient { layers }
}

/// Loss hyperparameters: `γ` (class-K slope), `λ` (penalty weight), `β` (LSE).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub gamma: f64,
    pub lambda: f64,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct LossGradient {
    /// `loss_hj + λ · loss_cbf`.
    pub loss: f64,
    /// Mean squared HJ residual.
    pub loss_hj: f64,
    /// Mean squared CBF-condition violation.
    pub loss_cbf: f64,
    pub grad: ParamGradient,
}

struct Partial {
    sum_hj: f64,
    sum_cbf: f64,
    grad: ParamGradient,
}

/// Batch loss `mean(N²) + λ·mean((−I)₊²)` and its exact parameter gradient.
///
/// `batch` rows are joint states `(x, e)`. The maximizing input of the
/// Hamiltonian and the active branches of `min` and `(·)₊` are held fixed
/// while differentiating; ties go to the `δ` branch.
pub fn loss_param_gradient(
    model: &CbfModel,
    batch: ArrayView2<f64>,
    spec: &LossSpec,
    system: &ControlAffineSystem,
    tree: &ConstraintTree,
) -> Result<LossGradient> {
    let total = batch.nrows();
    if total == 0 {
        return Err(Error::Config("loss batch is empty".into()));
    }
    check_len("joint state", model.normalizer.dim(), batch.ncols())?;
    let starts: Vec<usize> = (0..total).step_by(CHUNK_ROWS).collect();
    let weight = 1.0 / total as f64;
    let partials = parallel::map_ordered(&starts, |&start| {
        let end = (start + CHUNK_ROWS).min(total);
        chunk_gradient(
            model,
            batch.slice(s![start..end, ..]),
            start,
            weight,
            spec,
            system,
            tree,
        )
    });
    let mut partials = partials.into_iter();
    let mut acc = partials.next().expect("at least one chunk")?;
    for p in partials {
        let p = p?;
        acc.sum_hj += p.sum_hj;
        acc.sum_cbf += p.sum_cbf;
        acc.grad.add_assign(&p.grad);
    }
    let loss_hj = acc.sum_hj * weight;
    let loss_cbf = acc.sum_cbf * weight;
    Ok(LossGradient {
        loss: loss_hj + spec.lambda * loss_cbf,
        loss_hj,
        loss_cbf,
        grad: acc.grad,
    })
}

fn chunk_gradient(
    model: &CbfModel,
    rows: ArrayView2<f64>,
    offset: usize,
    weight: f64,
    spec: &LossSpec,
    system: &ControlAffineSystem,
    tree: &ConstraintTree,
) -> Result<Partial> {
    let n = system.state_dim();
    let batch = rows.nrows();
    let params = &model.params;
    let tape = run_forward(params, &model.normalizer, &model.config.periodic_inputs, rows, n);
    let out = outputs(&tape);
    let mut delta_bar = vec![0.0; batch];
    let mut grad_bar = Array2::zeros((batch, n));
    let (mut sum_hj, mut sum_cbf) = (0.0, 0.0);
    for r in 0..batch {
        let row = rows.row(r);
        let xi = row.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| row.to_vec());
        let (x, e) = xi.split_at(n);
        let (c_lower, dc) = tree.smooth_lower_with_gradient(x, e, spec.beta)?;
        let dd = out.delta_grad.row(r).to_vec();
        let terms = pde_terms(system, x, spec.gamma, c_lower, &dc[..n], out.delta[r], &dd);
        let residual = terms.residual();
        let violation = terms.violation();
        if !(residual.is_finite() && violation.is_finite()) {
            return Err(Error::NonFiniteLoss {
                sample: offset + r,
                xi,
            });
        }
        sum_hj += residual * residual;
        sum_cbf += violation * violation;

        let d_residual = 2.0 * residual * weight;
        let d_violation = 2.0 * spec.lambda * violation * weight;
        let mut cond_bar = 0.0;
        if terms.residual_selects_delta() {
            delta_bar[r] += d_residual;
        } else {
            cond_bar += d_residual;
        }
        if terms.condition < 0.0 {
            cond_bar -= d_violation;
        }
        // I = ∇hᵀ(f + g u*) + γ(c̲ − δ) with ∇h = ∇c̲ − ∇δ.
        delta_bar[r] -= spec.gamma * cond_bar;
        for j in 0..n {
            grad_bar[[r, j]] = -cond_bar * terms.closed_loop_rate[j];
        }
    }
    let grad = backward(&tape, params, &delta_bar, &grad_bar);
    Ok(Partial {
        sum_hj,
        sum_cbf,
        grad,
    })
}
