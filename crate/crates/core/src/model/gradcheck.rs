//! Central finite-difference check of the analytic gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{
    classifier_loss, classifier_tensors, forward, loss_and_gradients, pad_input, sample_loss, LossBreakdown, Sample,
};
use super::params::{Gradients, ModelParameters};
use crate::error::{Error, Result};
use crate::objectives::LossConfig;

/// Largest width multiplier the checker accepts.
pub const MAX_CHECK_WIDTH: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many entries per tensor (chosen with `seed`);
    /// `None` checks every scalar.
    pub max_entries_per_tensor: Option<usize>,
    /// Magnitudes below this are compared absolutely rather than relatively.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries_per_tensor: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_relative_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of the unified loss on one sample against
/// central differences, tensor by tensor, in double precision.
pub fn check_gradients(
    params: &ModelParameters<f64>,
    sample_in: &Sample<f64>,
    losses: &LossConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if params.config().width_multiplier > MAX_CHECK_WIDTH {
        return Err(Error::Config(format!(
            "gradient checks need width_multiplier <= {MAX_CHECK_WIDTH}, got {}",
            params.config().width_multiplier
        )));
    }
    if !(opts.step > 0.0 && opts.step.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {}", opts.step)));
    }
    let mut grads = Gradients::zeros_like(params);
    loss_and_gradients(params, sample_in, losses, 1.0, &mut grads)?;
    if let Some(name) = grads.first_non_finite(params) {
        return Err(Error::NonFiniteGradient(name.into()));
    }

    // The classifier only moves L_c, so its entries are probed from cached
    // pooled features plus the unchanged density term.
    let head = classifier_tensors(params);
    let base = sample_loss(params, sample_in, losses)?;
    let pooled = forward(params, &pad_input(&sample_in.image).0)?.spp_features;
    let label = sample_in.label.class_index;
    let probe_loss = |probe: &ModelParameters<f64>, ti: usize| -> Result<f64> {
        match &pooled {
            Some(pooled) if head.contains(&ti) => {
                let lc = classifier_loss(probe, pooled, label, losses)?;
                Ok(LossBreakdown { classification: lc, density: base.density }.total(losses.lambda))
            }
            _ => Ok(sample_loss(probe, sample_in, losses)?.total(losses.lambda)),
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let names: Vec<String> = params.named().map(|t| String::from(t.name)).collect();
    let mut report = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let len = params.tensors[ti].len();
        let entries: Vec<usize> = match opts.max_entries_per_tensor {
            Some(n) if n < len => sample(&mut rng, len, n).into_vec(),
            _ => (0..len).collect(),
        };
        let mut worst: f64 = 0.0;
        for &i in &entries {
            let orig = params.tensors[ti][i];
            probe.tensors[ti][i] = orig + opts.step;
            let up = probe_loss(&probe, ti)?;
            probe.tensors[ti][i] = orig - opts.step;
            let down = probe_loss(&probe, ti)?;
            probe.tensors[ti][i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            if !numeric.is_finite() {
                return Err(Error::NonFiniteGradient(name));
            }
            worst = worst.max(relative_error(grads.tensors[ti][i], numeric, opts.floor));
        }
        report.push(TensorCheck {
            name,
            checked: entries.len(),
            max_relative_error: worst,
        });
    }
    Ok(GradCheckReport { tensors: report })
}
