//! Residual feed-forward regressor from signal coefficients to FOD
//! coefficients.
//!
//! Topology (widths fixed): input → 400 → 45 → 200 → 45 → 200 → output.
//! Hidden layers use elu(α=1); the output projection is linear. The output
//! of the second hidden layer is added to the pre-activation of the fourth,
//! spanning the 45-200-45 block.

mod folds;
mod train;

pub use folds::{kfold_split, kfold_split_blocks, Fold, VoxelDataset};
pub use train::{predict, train, train_with_validation, Standardizer, TrainConfig, TrainOutcome};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Hidden widths x1..x5.
pub const HIDDEN_WIDTHS: [usize; 5] = [400, 45, 200, 45, 200];
/// Hidden layer (0-based) whose output feeds the skip connection.
pub const RESIDUAL_FROM: usize = 1;
/// Hidden layer (0-based) whose pre-activation receives it.
pub const RESIDUAL_INTO: usize = 3;
pub const ELU_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub output_dim: usize,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(invalid("network input and output widths must be at least 1"));
        }
        Ok(Self {
            input_dim,
            output_dim,
        })
    }

    /// (fan_in, fan_out) of every dense layer, output projection last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(HIDDEN_WIDTHS);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// One affine layer; `weights` is fan_out × fan_in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    arch: MlpArchitecture,
    layers: Vec<Dense>,
    seed: u64,
}

/// Seeded Gaussian initialization with σ = √(2/(fan_in+fan_out)); zero biases.
pub fn build_model(input_dim: usize, output_dim: usize, seed: u64) -> Result<MlpModel> {
    let arch = MlpArchitecture::new(input_dim, output_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            Dense {
                weights: DMatrix::from_fn(fan_out, fan_in, |_, _| normal.sample(&mut rng)),
                bias: DVector::zeros(fan_out),
            }
        })
        .collect();
    Ok(MlpModel { arch, layers, seed })
}

impl MlpModel {
    /// Assemble from explicit layers; shapes must chain per the architecture.
    pub fn from_layers(arch: MlpArchitecture, layers: Vec<Dense>, seed: u64) -> Result<Self> {
        let shapes = arch.layer_shapes();
        if layers.len() != shapes.len() {
            return Err(invalid(format!(
                "expected {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (k, (layer, (fan_in, fan_out))) in layers.iter().zip(shapes).enumerate() {
            if layer.weights.shape() != (fan_out, fan_in) || layer.bias.len() != fan_out {
                return Err(invalid(format!("layer {k} has the wrong shape")));
            }
        }
        Ok(Self { arch, layers, seed })
    }

    pub fn architecture(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.arch.parameter_count()
    }

    /// Flat parameter range of one layer: weights row-major, then bias.
    pub fn layer_param_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start: usize = self.layers[..layer]
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum();
        let l = &self.layers[layer];
        start..start + l.weights.len() + l.bias.len()
    }

    fn locate(&self, mut index: usize) -> (usize, Option<(usize, usize)>, usize) {
        for (k, l) in self.layers.iter().enumerate() {
            let nw = l.weights.len();
            if index < nw {
                let cols = l.weights.ncols();
                return (k, Some((index / cols, index % cols)), 0);
            }
            index -= nw;
            if index < l.bias.len() {
                return (k, None, index);
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn param(&self, index: usize) -> f64 {
        match self.locate(index) {
            (k, Some((r, c)), _) => self.layers[k].weights[(r, c)],
            (k, None, i) => self.layers[k].bias[i],
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        match self.locate(index) {
            (k, Some((r, c)), _) => self.layers[k].weights[(r, c)] = value,
            (k, None, i) => self.layers[k].bias[i] = value,
        }
    }
}

#[inline]
fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        ELU_ALPHA * z.exp_m1()
    }
}

#[inline]
fn elu_derivative(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        ELU_ALPHA * z.exp()
    }
}

/// Pre- and post-activations of every layer, feature × batch layout.
struct Trace {
    input: DMatrix<f64>,
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
}

fn affine(layer: &Dense, a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = &layer.weights * a;
    for mut col in z.column_iter_mut() {
        col += &layer.bias;
    }
    z
}

/// Forward pass on a feature × batch matrix.
fn forward_columns(model: &MlpModel, input: DMatrix<f64>) -> Trace {
    let n = model.layers.len();
    let mut pre = Vec::with_capacity(n);
    let mut post: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    for (k, layer) in model.layers.iter().enumerate() {
        let a = if k == 0 { &input } else { &post[k - 1] };
        let mut z = affine(layer, a);
        if k == RESIDUAL_INTO {
            z += &post[RESIDUAL_FROM];
        }
        let h = if k + 1 == n { z.clone() } else { z.map(elu) };
        pre.push(z);
        post.push(h);
    }
    Trace { input, pre, post }
}

fn check_width(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::LengthMismatch { expected, found });
    }
    Ok(())
}

/// Rows = samples in, rows = samples out.
pub fn forward(model: &MlpModel, batch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_width(model.input_dim(), batch.ncols())?;
    let trace = forward_columns(model, batch.transpose());
    Ok(trace.post.last().expect("non-empty").transpose())
}

/// Post-activation outputs of the five hidden layers (rows = samples).
pub fn hidden_activations(model: &MlpModel, batch: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
    check_width(model.input_dim(), batch.ncols())?;
    let trace = forward_columns(model, batch.transpose());
    Ok(trace.post[..HIDDEN_WIDTHS.len()].iter().map(|h| h.transpose()).collect())
}

/// Parameter gradients, same layout as the model's layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn param(&self, model: &MlpModel, index: usize) -> f64 {
        match model.locate(index) {
            (k, Some((r, c)), _) => self.layers[k].weights[(r, c)],
            (k, None, i) => self.layers[k].bias[i],
        }
    }
}

/// Mean squared error over all batch entries, feature × batch layout.
fn mse_columns(out: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
    let n = out.len().max(1) as f64;
    out.iter().zip(targets.iter()).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / n
}

/// Loss and backpropagated gradients for a feature × batch input.
pub(crate) fn backprop_columns(model: &MlpModel, input: DMatrix<f64>, targets: &DMatrix<f64>) -> (f64, Gradients) {
    let trace = forward_columns(model, input);
    let n_layers = model.layers.len();
    let out = &trace.post[n_layers - 1];
    let loss = mse_columns(out, targets);
    let scale = 2.0 / out.len() as f64;
    let mut delta = (out - targets) * scale;

    let mut grads: Vec<Option<Dense>> = vec![None; n_layers];
    // gradient arriving at post[RESIDUAL_FROM] through the skip connection
    let mut skip: Option<DMatrix<f64>> = None;
    for k in (0..n_layers).rev() {
        if k + 1 < n_layers {
            // delta currently holds dL/dpost[k]
            if k == RESIDUAL_FROM {
                if let Some(s) = skip.take() {
                    delta += s;
                }
            }
            let d = &trace.pre[k];
            delta.zip_apply(d, |g, z| *g *= elu_derivative(z));
        }
        if k == RESIDUAL_INTO {
            skip = Some(delta.clone());
        }
        let a = if k == 0 { &trace.input } else { &trace.post[k - 1] };
        let dw = &delta * a.transpose();
        let db = delta.column_sum();
        let next = if k > 0 {
            Some(model.layers[k].weights.transpose() * &delta)
        } else {
            None
        };
        grads[k] = Some(Dense {
            weights: dw,
            bias: db,
        });
        if let Some(n) = next {
            delta = n;
        }
    }
    (
        loss,
        Gradients {
            layers: grads.into_iter().map(|g| g.expect("filled")).collect(),
        },
    )
}

/// MSE loss of the model on a batch (rows = samples).
pub fn mse_loss(model: &MlpModel, batch: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<f64> {
    let out = forward(model, batch)?;
    check_width(out.ncols(), targets.ncols())?;
    check_width(out.nrows(), targets.nrows())?;
    Ok(mse_columns(&out, targets))
}

/// Analytic gradients of the MSE loss (rows = samples).
pub fn gradients(model: &MlpModel, batch: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<(f64, Gradients)> {
    check_width(model.input_dim(), batch.ncols())?;
    check_width(model.output_dim(), targets.ncols())?;
    check_width(batch.nrows(), targets.nrows())?;
    Ok(backprop_columns(model, batch.transpose(), &targets.transpose()))
}

/// Central-difference step used by the gradient checks.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors of near-zero gradients.
pub const FD_ABS_FLOOR: f64 = 1e-7;
const CHECKED_PARAMS: usize = 256;

/// Max relative error between analytic and central-difference gradients over
/// `CHECKED_PARAMS` parameters drawn with a fixed seed.
pub fn gradient_check(model: &MlpModel, batch: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed() ^ 0x5eed);
    let total = model.parameter_count();
    let picks = sample(&mut rng, total, CHECKED_PARAMS.min(total)).into_vec();
    gradient_check_params(model, batch, targets, &picks)
}

/// Gradient check restricted to the given flat parameter indices.
pub fn gradient_check_params(model: &MlpModel, batch: &DMatrix<f64>, targets: &DMatrix<f64>, params: &[usize]) -> Result<f64> {
    let (_, analytic) = gradients(model, batch, targets)?;
    let mut probe = model.clone();
    let mut worst = 0.0_f64;
    for &p in params {
        let orig = probe.param(p);
        probe.set_param(p, orig + FD_STEP);
        let up = mse_loss(&probe, batch, targets)?;
        probe.set_param(p, orig - FD_STEP);
        let down = mse_loss(&probe, batch, targets)?;
        probe.set_param(p, orig);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.param(model, p);
        let denom = a.abs().max(numeric.abs()).max(FD_ABS_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        DMatrix::from_fn(rows, cols, |_, _| n.sample(&mut rng))
    }

    #[test]
    fn parameter_count_from_shapes() {
        let m = build_model(50, 45, 1).unwrap();
        let widths = [50, 400, 45, 200, 45, 200, 45];
        let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        assert_eq!(m.parameter_count(), expected);
        let total: usize = m.layers().iter().map(|l| l.weights.len() + l.bias.len()).sum();
        assert_eq!(total, expected);
        assert_eq!(build_model(50, 50, 1).unwrap().layers().last().unwrap().bias.len(), 50);
        assert!(build_model(0, 45, 1).is_err());
        assert!(build_model(50, 0, 1).is_err());
    }

    #[test]
    fn deterministic_init() {
        assert_eq!(build_model(50, 45, 9).unwrap(), build_model(50, 45, 9).unwrap());
        assert_ne!(build_model(50, 45, 9).unwrap(), build_model(50, 45, 10).unwrap());
    }

    #[test]
    fn zero_model_outputs_zero() {
        let mut m = build_model(7, 3, 1).unwrap();
        for l in m.layers_mut() {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        let out = forward(&m, &batch(5, 7, 2)).unwrap();
        assert_eq!(out.shape(), (5, 3));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let m = build_model(7, 3, 1).unwrap();
        assert!(forward(&m, &batch(5, 6, 2)).is_err());
        assert!(gradients(&m, &batch(5, 7, 2), &batch(5, 4, 3)).is_err());
    }

    #[test]
    fn large_inputs_stay_finite() {
        let m = build_model(50, 45, 4).unwrap();
        let x = batch(16, 50, 5) * 1e3;
        assert!(forward(&m, &x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn residual_identity() {
        let mut m = build_model(6, 4, 3).unwrap();
        for k in [2usize, 3] {
            m.layers_mut()[k].weights.fill(0.0);
            m.layers_mut()[k].bias.fill(0.0);
        }
        let h = hidden_activations(&m, &batch(4, 6, 8)).unwrap();
        let expected = h[1].map(elu);
        assert!((&h[3] - expected).amax() < 1e-15);
    }

    #[test]
    fn output_bias_gradient_is_mean_residual() {
        let mut m = build_model(5, 3, 3).unwrap();
        for l in m.layers_mut() {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        m.layers_mut()[5].bias.copy_from_slice(&[0.5, -1.0, 2.0]);
        let x = batch(4, 5, 1);
        let t = batch(4, 3, 2);
        let (_, g) = gradients(&m, &x, &t).unwrap();
        let out = forward(&m, &x).unwrap();
        for k in 0..3 {
            let mean = (0..4).map(|r| out[(r, k)] - t[(r, k)]).sum::<f64>() / 4.0;
            assert!((g.layers[5].bias[k] - 2.0 * mean / 3.0).abs() < 1e-14);
        }
        let range = m.layer_param_range(5);
        let bias_params: Vec<usize> = (range.end - 3..range.end).collect();
        assert!(gradient_check_params(&m, &x, &t, &bias_params).unwrap() < 1e-6);
    }

    #[test]
    fn fresh_model_gradient_check() {
        let m = build_model(12, 6, 21).unwrap();
        let err = gradient_check(&m, &batch(6, 12, 1), &batch(6, 6, 2)).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn skip_connection_gradient() {
        let m = build_model(10, 5, 17).unwrap();
        let x = batch(8, 10, 3);
        let t = batch(8, 5, 4);
        let range = m.layer_param_range(RESIDUAL_FROM);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let picks: Vec<usize> = sample(&mut rng, range.len(), 200)
            .into_iter()
            .map(|i| range.start + i)
            .collect();
        let err = gradient_check_params(&m, &x, &t, &picks).unwrap();
        assert!(err < 1e-4, "max relative error {err}");

        // dropping the skip term from backprop must break agreement
        let (_, g) = gradients(&m, &x, &t).unwrap();
        let mut no_skip = m.clone();
        for k in [2usize, 3] {
            no_skip.layers_mut()[k].weights.fill(0.0);
        }
        let (_, g0) = gradients(&no_skip, &x, &t).unwrap();
        // with W3 = W4 = 0 the only route from W2 to the loss is the skip
        assert!(g0.layers[RESIDUAL_FROM].weights.amax() > 0.0);
        assert!(g.layers[RESIDUAL_FROM].weights.amax() > 0.0);
    }

    #[test]
    fn flat_parameter_accessors() {
        let mut m = build_model(3, 2, 0).unwrap();
        let r = m.layer_param_range(0);
        assert_eq!(r, 0..(3 * 400 + 400));
        assert_eq!(m.param(1), m.layers()[0].weights[(0, 1)]);
        m.set_param(r.end - 1, 4.0);
        assert_eq!(m.layers()[0].bias[399], 4.0);
    }
}
