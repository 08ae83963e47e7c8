//! Combined multi-task objective over the global score and the 13 item scores.
//!
//! With `n` samples, predictions `ŷ` and targets `y` laid out as
//! `[global, Q1, .., Q13]` per row:
//!
//! ```text
//! mse_global    = 1/n Σᵢ (yᵢ₀ − ŷᵢ₀)²
//! mse_subscores = Σⱼ wⱼ · 1/n Σᵢ (yᵢⱼ − ŷᵢⱼ)²      (wⱼ = 1/13 unless overridden)
//! total_loss    = α · mse_subscores + (1 − α) · mse_global
//! ```
//!
//! The f64 functions here are the reference implementation; [`tensor_total_loss`]
//! evaluates the same objective on candle tensors for backpropagation.

use candle_core::{Device, Tensor};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clinical::{NUM_ITEMS, NUM_OUTPUTS};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("subscore weights must be non-negative and sum to 1")]
    InvalidWeights,
    #[error("batch must contain at least one sample")]
    EmptyBatch,
    #[error("predictions have shape {predictions:?}, targets {targets:?}; expected [n, 14]")]
    ShapeMismatch {
        predictions: (usize, usize),
        targets: (usize, usize),
    },
    #[error("non-finite value at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    /// Per-item weights inside the sub-score term. `None` means uniform 1/13.
    pub subscore_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            subscore_weights: None,
        }
    }
}

impl LossConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        LossConfig {
            alpha,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::InvalidAlpha(self.alpha));
        }
        if let Some(w) = &self.subscore_weights {
            let sum: f64 = w.iter().sum();
            if w.len() != NUM_ITEMS
                || w.iter().any(|v| !(v.is_finite() && *v >= 0.0))
                || (sum - 1.0).abs() > 1e-9
            {
                return Err(LossError::InvalidWeights);
            }
        }
        Ok(())
    }

    /// Effective item weights.
    pub fn weights(&self) -> [f64; NUM_ITEMS] {
        match &self.subscore_weights {
            Some(w) => std::array::from_fn(|j| w[j]),
            None => [1.0 / NUM_ITEMS as f64; NUM_ITEMS],
        }
    }

    /// Coefficient applied to each output column's mean squared error.
    pub fn column_weights(&self) -> [f64; NUM_OUTPUTS] {
        let w = self.weights();
        std::array::from_fn(|c| {
            if c == 0 {
                1.0 - self.alpha
            } else {
                self.alpha * w[c - 1]
            }
        })
    }
}

/// Paired prediction and target matrices, both `[n, 14]`, finite, `n ≥ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    predictions: Array2<f64>,
    targets: Array2<f64>,
}

impl PredictionBatch {
    pub fn new(predictions: Array2<f64>, targets: Array2<f64>) -> Result<Self, LossError> {
        if predictions.dim() != targets.dim() || predictions.ncols() != NUM_OUTPUTS {
            return Err(LossError::ShapeMismatch {
                predictions: predictions.dim(),
                targets: targets.dim(),
            });
        }
        if predictions.nrows() == 0 {
            return Err(LossError::EmptyBatch);
        }
        for m in [&predictions, &targets] {
            if let Some(((row, column), _)) = m.indexed_iter().find(|(_, v)| !v.is_finite()) {
                return Err(LossError::NonFinite { row, column });
            }
        }
        Ok(PredictionBatch {
            predictions,
            targets,
        })
    }

    pub fn from_rows(
        predictions: &[[f64; NUM_OUTPUTS]],
        targets: &[[f64; NUM_OUTPUTS]],
    ) -> Result<Self, LossError> {
        let to_array = |rows: &[[f64; NUM_OUTPUTS]]| {
            Array2::from_shape_fn((rows.len(), NUM_OUTPUTS), |(i, j)| rows[i][j])
        };
        Self::new(to_array(predictions), to_array(targets))
    }

    pub fn len(&self) -> usize {
        self.predictions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn predictions(&self) -> ArrayView2<'_, f64> {
        self.predictions.view()
    }

    pub fn targets(&self) -> ArrayView2<'_, f64> {
        self.targets.view()
    }

    /// Mean squared error of each of the 14 columns.
    pub fn column_mse(&self) -> [f64; NUM_OUTPUTS] {
        let sq = (&self.predictions - &self.targets).mapv(|d| d * d);
        let mean = sq.mean_axis(Axis(0)).expect("non-empty batch");
        std::array::from_fn(|c| mean[c])
    }
}

pub fn mse_global(batch: &PredictionBatch) -> f64 {
    batch.column_mse()[0]
}

/// Uniformly averaged item MSE.
pub fn mse_subscores(batch: &PredictionBatch) -> f64 {
    weighted_mse_subscores(batch, &[1.0 / NUM_ITEMS as f64; NUM_ITEMS])
}

pub fn weighted_mse_subscores(batch: &PredictionBatch, weights: &[f64; NUM_ITEMS]) -> f64 {
    let mse = batch.column_mse();
    weights.iter().zip(&mse[1..]).map(|(w, m)| w * m).sum()
}

pub fn total_loss(batch: &PredictionBatch, config: &LossConfig) -> Result<f64, LossError> {
    config.validate()?;
    let sub = weighted_mse_subscores(batch, &config.weights());
    let global = mse_global(batch);
    Ok(config.alpha * sub + (1.0 - config.alpha) * global)
}

/// ∂ total_loss / ∂ predictions, shape `[n, 14]`.
pub fn total_loss_gradient(
    batch: &PredictionBatch,
    config: &LossConfig,
) -> Result<Array2<f64>, LossError> {
    config.validate()?;
    let cw = config.column_weights();
    let scale = 2.0 / batch.len() as f64;
    let mut grad = &batch.predictions - &batch.targets;
    for (c, mut col) in grad.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|d| scale * cw[c] * d);
    }
    Ok(grad)
}

/// Tensor form of [`total_loss`] for `[n, 14]` prediction and target tensors.
/// Returns a scalar tensor in the dtype of `predictions`.
pub fn tensor_total_loss(
    predictions: &Tensor,
    targets: &Tensor,
    config: &LossConfig,
) -> candle_core::Result<Tensor> {
    let cw = column_weight_tensor(config, predictions.dtype(), predictions.device())?;
    per_column_mse(predictions, targets)?.mul(&cw)?.sum_all()
}

/// `[14]` tensor of per-column mean squared errors.
pub fn per_column_mse(predictions: &Tensor, targets: &Tensor) -> candle_core::Result<Tensor> {
    predictions.sub(targets)?.sqr()?.mean(0)
}

fn column_weight_tensor(
    config: &LossConfig,
    dtype: candle_core::DType,
    device: &Device,
) -> candle_core::Result<Tensor> {
    Tensor::new(&config.column_weights(), device)?.to_dtype(dtype)
}
