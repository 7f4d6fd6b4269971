//! The cascaded network: shared convolutions, a count-group classifier with
//! spatial pyramid pooling, and a density decoder that fuses the classifier's
//! features before upsampling back to full resolution.

mod config;
mod gradcheck;
mod layers;
mod network;
mod params;

pub use config::{ConvSpec, NetworkConfig, INITIAL_PRELU_SLOPE, UPSAMPLE_KERNEL, UPSAMPLE_PAD, UPSAMPLE_STRIDE};
pub use gradcheck::{check_gradients, relative_error, GradCheckOptions, GradCheckReport, TensorCheck, MAX_CHECK_WIDTH};
pub use network::{
    forward, loss_and_gradients, pad_input, predict_density, sample_loss, ForwardOutputs, LossBreakdown, Sample,
    INPUT_MULTIPLE,
};
pub use params::{build_model, Gradients, ModelParameters, NamedTensor};

use alloc::vec::Vec;

use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Spatial pyramid pooling of a feature stack into a vector of length
/// `channels * sum(n * n)`, ordered by level, then channel, then cell.
pub fn spp<T: Real>(features: &Tensor<T>, levels: &[usize]) -> Result<Vec<T>> {
    layers::spp_forward(features, levels).map(|(v, _)| v)
}
