use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Architecture, NetworkConfig, ParamKind, INITIAL_PRELU_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// All learnable tensors of a network, in a fixed order derived from its
/// configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T> {
    config: NetworkConfig,
    pub(crate) arch: Architecture,
    pub(crate) tensors: Vec<Vec<T>>,
}

/// A named, shaped view of one parameter tensor.
#[derive(Debug, Clone, Copy)]
pub struct NamedTensor<'a, T> {
    pub name: &'a str,
    pub shape: &'a [usize],
    pub data: &'a [T],
}

/// Allocates and initializes a network.
///
/// Weights are drawn from `N(0, gain / fan_in)` with gain 2 ahead of a PReLU
/// and 1 for the linear layers; biases start at zero and PReLU slopes at
/// 0.25. The draw is deterministic in `rng_seed`.
pub fn build_model<T: Real>(cfg: &NetworkConfig, rng_seed: u64) -> Result<ModelParameters<T>> {
    let arch = Architecture::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let tensors = arch
        .params
        .iter()
        .map(|spec| match spec.kind {
            ParamKind::Weight => {
                let gain = if spec.rectified { 2.0 } else { 1.0 };
                let std = Float::sqrt(gain / spec.fan_in.max(1) as f64);
                let normal = Normal::new(0.0, std).expect("std is positive and finite");
                (0..spec.len()).map(|_| T::of(normal.sample(&mut rng))).collect()
            }
            ParamKind::Bias => vec![T::zero(); spec.len()],
            ParamKind::Slope => vec![T::of(INITIAL_PRELU_SLOPE); spec.len()],
        })
        .collect();
    Ok(ModelParameters {
        config: cfg.clone(),
        arch,
        tensors,
    })
}

impl<T: Real> ModelParameters<T> {
    /// Rebuilds parameters from named tensors, checking each against the
    /// shapes `config` requires. The first tensor that is missing, surplus or
    /// of the wrong shape is reported by name.
    pub fn from_named(config: &NetworkConfig, named: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let mut slots: Vec<Option<(Vec<usize>, Vec<T>)>> = vec![None; arch.params.len()];
        let mut extra: Option<(String, Vec<usize>)> = None;
        for (name, shape, data) in named {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: Some(shape),
                    actual: Some(vec![data.len()]),
                });
            }
            match arch.param_index(&name) {
                Some(i) => slots[i] = Some((shape, data)),
                None => {
                    extra.get_or_insert((name, shape));
                }
            }
        }
        // Validate in parameter order so the first offending tensor is named.
        let mut tensors = Vec::with_capacity(slots.len());
        for (spec, slot) in arch.params.iter().zip(slots) {
            match slot {
                Some((shape, data)) if shape == spec.shape => tensors.push(data),
                other => {
                    return Err(Error::ShapeMismatch {
                        name: spec.name.clone(),
                        expected: Some(spec.shape.clone()),
                        actual: other.map(|(shape, _)| shape),
                    })
                }
            }
        }
        if let Some((name, shape)) = extra {
            return Err(Error::ShapeMismatch {
                name,
                expected: None,
                actual: Some(shape),
            });
        }
        Ok(Self {
            config: config.clone(),
            arch,
            tensors,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn named(&self) -> impl Iterator<Item = NamedTensor<'_, T>> {
        self.arch
            .params
            .iter()
            .zip(&self.tensors)
            .map(|(spec, data)| NamedTensor {
                name: &spec.name,
                shape: &spec.shape,
                data,
            })
    }

    pub fn tensor(&self, name: &str) -> Option<NamedTensor<'_, T>> {
        self.named().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let i = self.arch.param_index(name)?;
        Some(&mut self.tensors[i])
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.tensors
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config.clone(),
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.iter().map(|&v| U::from(v).unwrap_or_else(U::nan)).collect())
                .collect(),
        }
    }
}

/// Gradient buffers laid out like the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub(crate) tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &ModelParameters<T>) -> Self {
        Self {
            tensors: params.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
        }
    }

    pub fn tensors(&self) -> &[Vec<T>] {
        &self.tensors
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite<'a>(&self, params: &'a ModelParameters<T>) -> Option<&'a str> {
        self.tensors
            .iter()
            .zip(&params.arch.params)
            .find(|(t, _)| t.iter().any(|v| !v.is_finite()))
            .map(|(_, spec)| spec.name.as_str())
    }
}
