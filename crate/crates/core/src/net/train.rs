use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backprop_columns, forward, Dense, MlpModel, VoxelDataset};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// RMSProp step size η.
    pub learning_rate: f64,
    /// RMSProp decay ρ.
    pub rho: f64,
    /// RMSProp stabilizer.
    pub epsilon: f64,
    pub k_folds: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1000,
            epochs: 100,
            seed: 0,
            learning_rate: 1e-3,
            rho: 0.9,
            epsilon: 1e-8,
            k_folds: 5,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.k_folds < 2 {
            return Err(invalid("k_folds must be at least 2"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.rho) || !(self.epsilon > 0.0) {
            return Err(invalid("invalid RMSProp hyperparameters"));
        }
        Ok(())
    }
}

/// Per-column affine normalization of inputs and targets, estimated on
/// training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_scale: Vec<f64>,
}

fn column_stats(m: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = m.nrows().max(1) as f64;
    m.column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            (mean, if sd > 1e-12 { sd } else { 1.0 })
        })
        .unzip()
}

fn normalize(m: &DMatrix<f64>, mean: &[f64], scale: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| (m[(r, c)] - mean[c]) / scale[c])
}

fn denormalize(m: &DMatrix<f64>, mean: &[f64], scale: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)] * scale[c] + mean[c])
}

impl Standardizer {
    pub fn fit(data: &VoxelDataset) -> Self {
        let (input_mean, input_scale) = column_stats(&data.inputs);
        let (target_mean, target_scale) = column_stats(&data.targets);
        Self {
            input_mean,
            input_scale,
            target_mean,
            target_scale,
        }
    }

    pub fn identity(input_dim: usize, target_dim: usize) -> Self {
        Self {
            input_mean: vec![0.0; input_dim],
            input_scale: vec![1.0; input_dim],
            target_mean: vec![0.0; target_dim],
            target_scale: vec![1.0; target_dim],
        }
    }

    pub fn transform_inputs(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        normalize(inputs, &self.input_mean, &self.input_scale)
    }

    pub fn transform_targets(&self, targets: &DMatrix<f64>) -> DMatrix<f64> {
        normalize(targets, &self.target_mean, &self.target_scale)
    }

    pub fn inverse_targets(&self, targets: &DMatrix<f64>) -> DMatrix<f64> {
        denormalize(targets, &self.target_mean, &self.target_scale)
    }

    pub fn transform(&self, data: &VoxelDataset) -> Result<VoxelDataset> {
        VoxelDataset::new(
            self.transform_inputs(&data.inputs),
            self.transform_targets(&data.targets),
            data.block_ids.clone(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    /// Mean training loss of every epoch run.
    pub loss_history: Vec<f64>,
    /// Validation loss after every epoch (empty without validation data).
    pub validation_history: Vec<f64>,
    /// Epoch (1-based) whose weights were returned.
    pub best_epoch: usize,
}

struct RmsProp {
    cache: Vec<Dense>,
    rho: f64,
    lr: f64,
    eps: f64,
}

impl RmsProp {
    fn new(model: &MlpModel, cfg: &TrainConfig) -> Self {
        Self {
            cache: model
                .layers()
                .iter()
                .map(|l| Dense {
                    weights: DMatrix::zeros(l.weights.nrows(), l.weights.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
            rho: cfg.rho,
            lr: cfg.learning_rate,
            eps: cfg.epsilon,
        }
    }

    fn step(&mut self, model: &mut MlpModel, grads: &[Dense]) {
        let (rho, lr, eps) = (self.rho, self.lr, self.eps);
        for ((layer, cache), g) in model.layers_mut().iter_mut().zip(&mut self.cache).zip(grads) {
            let update = |p: &mut f64, s: &mut f64, g: f64| {
                *s = rho * *s + (1.0 - rho) * g * g;
                *p -= lr * g / (s.sqrt() + eps);
            };
            for ((p, s), g) in layer
                .weights
                .iter_mut()
                .zip(cache.weights.iter_mut())
                .zip(g.weights.iter())
            {
                update(p, s, *g);
            }
            for ((p, s), g) in layer.bias.iter_mut().zip(cache.bias.iter_mut()).zip(g.bias.iter()) {
                update(p, s, *g);
            }
        }
    }
}

fn check_dims(model: &MlpModel, data: &VoxelDataset) -> Result<()> {
    if data.input_dim() != model.input_dim() {
        return Err(Error::LengthMismatch {
            expected: model.input_dim(),
            found: data.input_dim(),
        });
    }
    if data.target_dim() != model.output_dim() {
        return Err(Error::LengthMismatch {
            expected: model.output_dim(),
            found: data.target_dim(),
        });
    }
    Ok(())
}

/// Mini-batch RMSProp on the MSE loss.
pub fn train(model: &MlpModel, data: &VoxelDataset, cfg: &TrainConfig) -> Result<(MlpModel, Vec<f64>)> {
    let out = train_with_validation(model, data, None, cfg)?;
    Ok((out.model, out.loss_history))
}

/// Like [`train`], but with optional validation data: the weights of the epoch
/// with the lowest validation loss are returned and `cfg.patience` (if set)
/// ends training early.
pub fn train_with_validation(
    model: &MlpModel,
    data: &VoxelDataset,
    validation: Option<&VoxelDataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("training data is empty"));
    }
    check_dims(model, data)?;
    if let Some(v) = validation {
        check_dims(model, v)?;
    }

    let inputs_t = data.inputs.transpose();
    let targets_t = data.targets.transpose();
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = model.clone();
    let mut optimizer = RmsProp::new(&current, cfg);

    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let mut validation_history = Vec::new();
    let mut best: Option<(f64, usize, MlpModel)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = inputs_t.select_columns(chunk);
            let t = targets_t.select_columns(chunk);
            let (loss, grads) = backprop_columns(&current, x, &t);
            epoch_loss += loss * chunk.len() as f64;
            optimizer.step(&mut current, &grads.layers);
        }
        loss_history.push(epoch_loss / n as f64);

        if let Some(v) = validation {
            let out = forward(&current, &v.inputs)?;
            let vloss = out
                .iter()
                .zip(v.targets.iter())
                .map(|(o, t)| (o - t).powi(2))
                .sum::<f64>()
                / out.len().max(1) as f64;
            validation_history.push(vloss);
            let improved = best.as_ref().is_none_or(|(b, _, _)| vloss < *b);
            if improved {
                best = Some((vloss, epoch, current.clone()));
            } else if let (Some(p), Some((_, be, _))) = (cfg.patience, best.as_ref()) {
                if epoch - be >= p {
                    break;
                }
            }
        }
    }

    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (current, loss_history.len()),
    };
    Ok(TrainOutcome {
        model,
        loss_history,
        validation_history,
        best_epoch,
    })
}

/// Forward pass without side effects; identical to [`forward`].
pub fn predict(model: &MlpModel, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    forward(model, inputs)
}
