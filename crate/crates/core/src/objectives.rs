//! Losses of the two stages and their weighted combination.
//!
//! The prior stage is scored with a class-weighted negative log-likelihood of
//! the softmax probabilities; the density stage with a squared Euclidean
//! distance to the ground-truth map. The cascade is trained on
//! `lambda * L_c + L_d`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{ClassWeights, CountGroupLabel};
use crate::error::{Error, Result};
use crate::ground_truth::DensityMap;
use crate::tensor::Real;

/// Guards `ln(0)` in the classification loss.
pub const PROB_EPSILON: f64 = 1e-12;

/// The classification weight used for the cascade.
pub const DEFAULT_LAMBDA: f64 = 1e-4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityNormalization {
    /// Mean squared error over pixels.
    #[default]
    PerPixelMean,
    /// Euclidean norm of the per-image difference.
    PerImageSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub class_weights: ClassWeights,
    #[serde(default)]
    pub density_loss_normalization: DensityNormalization,
}

impl LossConfig {
    pub fn new(lambda: f64, class_weights: ClassWeights) -> Self {
        Self {
            lambda,
            class_weights,
            density_loss_normalization: DensityNormalization::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be non-negative and finite, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// `-w_y * ln(p_y + eps)` for one sample.
pub fn classification_loss(
    class_probs: &[f64],
    label: CountGroupLabel,
    weights: &ClassWeights,
) -> Result<f64> {
    check_label(class_probs.len(), label, weights)?;
    Ok(classification_term(class_probs, label.class_index, weights.get(label.class_index)).0)
}

/// Batch mean of [`classification_loss`].
pub fn mean_classification_loss(
    batch: &[(&[f64], CountGroupLabel)],
    weights: &ClassWeights,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut total = 0.0;
    for (probs, label) in batch {
        total += classification_loss(probs, *label, weights)?;
    }
    Ok(total / batch.len() as f64)
}

fn check_label(classes: usize, label: CountGroupLabel, weights: &ClassWeights) -> Result<()> {
    if label.class_index >= classes || weights.len() != classes {
        return Err(Error::Input(format!(
            "label {} with {} class weights does not fit {classes} class probabilities",
            label.class_index,
            weights.len()
        )));
    }
    Ok(())
}

/// Density loss of one predicted map against its target.
pub fn density_loss(
    predicted: &DensityMap,
    target: &DensityMap,
    normalization: DensityNormalization,
) -> Result<f64> {
    if predicted.dims() != target.dims() {
        return Err(Error::Input(format!(
            "predicted density is {:?} but target is {:?}",
            predicted.dims(),
            target.dims()
        )));
    }
    Ok(density_term(predicted.data(), target.data(), normalization).0)
}

/// Batch mean of [`density_loss`].
pub fn mean_density_loss(
    batch: &[(&DensityMap, &DensityMap)],
    normalization: DensityNormalization,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut total = 0.0;
    for (p, t) in batch {
        total += density_loss(p, t, normalization)?;
    }
    Ok(total / batch.len() as f64)
}

/// `lambda * classification + density`.
pub fn unified_loss(classification: f64, density: f64, lambda: f64) -> f64 {
    lambda * classification + density
}

/// Weighted NLL of the softmax output and its gradient with respect to the
/// pre-softmax scores.
pub(crate) fn classification_term<T: Real>(probs: &[T], label: usize, weight: f64) -> (T, Vec<T>) {
    let w = T::of(weight);
    let py = probs[label];
    let shifted = py + T::of(PROB_EPSILON);
    let loss = -w * shifted.ln();
    // d/ds_j of -w ln(p_y + eps) = -w p_y (delta_jy - p_j) / (p_y + eps)
    let scale = -w * py / shifted;
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            let delta = if j == label { T::one() } else { T::zero() };
            scale * (delta - pj)
        })
        .collect();
    (loss, grad)
}

/// Density loss and its gradient with respect to the prediction.
pub(crate) fn density_term<T: Real>(
    pred: &[T],
    target: &[T],
    normalization: DensityNormalization,
) -> (T, Vec<T>) {
    debug_assert_eq!(pred.len(), target.len());
    let mut sq = T::zero();
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        sq += d * d;
    }
    match normalization {
        DensityNormalization::PerPixelMean => {
            let n = T::of(pred.len().max(1) as f64);
            let two_over_n = T::of(2.0) / n;
            let grad = pred
                .iter()
                .zip(target)
                .map(|(&p, &t)| two_over_n * (p - t))
                .collect();
            (sq / n, grad)
        }
        DensityNormalization::PerImageSum => {
            let norm = sq.sqrt();
            if norm == T::zero() {
                return (norm, vec![T::zero(); pred.len()]);
            }
            let grad = pred
                .iter()
                .zip(target)
                .map(|(&p, &t)| (p - t) / norm)
                .collect();
            (norm, grad)
        }
    }
}

/// Numerically stable softmax.
pub(crate) fn softmax<T: Real>(scores: &[T]) -> Vec<T> {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}
