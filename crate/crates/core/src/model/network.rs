use alloc::vec;
use alloc::vec::Vec;

use super::config::ConvLayer;
use super::layers::{
    conv_backward, conv_forward, deconv_backward, deconv_forward, dense_backward, dense_forward, spp_backward,
    spp_forward, ConvCache, DeconvCache, DenseCache,
};
use super::params::{Gradients, ModelParameters};
use crate::data::{CountGroupLabel, GrayImage};
use crate::error::{Error, Result};
use crate::ground_truth::DensityMap;
use crate::objectives::{classification_term, density_term, softmax, unified_loss, LossConfig};
use crate::tensor::{Real, Tensor};

/// Spatial multiple every network input must have.
pub const INPUT_MULTIPLE: usize = 4;

/// Everything one forward pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs<T> {
    /// Pre-softmax group scores; `None` for a single-stage network.
    pub class_scores: Option<Vec<T>>,
    pub class_probs: Option<Vec<T>>,
    /// Output of the prior stage's last convolution, at a quarter resolution.
    pub prior_features: Option<Tensor<T>>,
    /// Pyramid-pooled prior features fed to the classifier.
    pub spp_features: Option<Vec<T>>,
    /// Single-channel density at the input resolution.
    pub density: Tensor<T>,
}

impl<T: Real> ForwardOutputs<T> {
    pub fn density_map(&self) -> DensityMap {
        let data = self.density.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        DensityMap::from_vec(self.density.height(), self.density.width(), data)
            .expect("network produced a non-finite density")
    }

    /// Predicted count: the integral of the density with negative values clamped to zero.
    pub fn count(&self) -> f64 {
        clamped_sum(self.density.data())
    }
}

pub(crate) fn clamped_sum<T: Real>(values: &[T]) -> f64 {
    values.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).max(0.0)).sum()
}

/// Zero-pads the right and bottom of `image` to the next multiple of four,
/// returning the padded stack and the original `(height, width)`.
pub fn pad_input<T: Real>(image: &Tensor<T>) -> (Tensor<T>, (usize, usize)) {
    let (h, w) = (image.height(), image.width());
    let up = |n: usize| n.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE;
    (image.zero_pad_to(up(h), up(w)), (h, w))
}

#[derive(Debug, Clone)]
struct Trace<T> {
    shared: Vec<ConvCache<T>>,
    prior: Option<PriorTrace<T>>,
    density: Vec<ConvCache<T>>,
    density_c: usize,
    fusion: Vec<ConvCache<T>>,
    upsample: Vec<DeconvCache<T>>,
    output: ConvCache<T>,
}

#[derive(Debug, Clone)]
struct PriorTrace<T> {
    convs: Vec<ConvCache<T>>,
    feat_dims: (usize, usize, usize),
    spp_arg: Vec<u32>,
    dense: Vec<DenseCache<T>>,
}

fn run_convs<T: Real>(
    layers: &[ConvLayer],
    params: &[Vec<T>],
    mut x: Tensor<T>,
    caches: Option<&mut Vec<ConvCache<T>>>,
) -> Tensor<T> {
    let keep = caches.is_some();
    let mut kept = Vec::new();
    for layer in layers {
        let (y, cache) = conv_forward(layer, params, x, keep);
        kept.extend(cache);
        x = y;
    }
    if let Some(c) = caches {
        *c = kept;
    }
    x
}

fn check_input<T: Real>(params: &ModelParameters<T>, input: &Tensor<T>) -> Result<()> {
    let cfg = params.config();
    let (h, w) = (input.height(), input.width());
    if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::UnpaddedInput {
            height: h,
            width: w,
            multiple: INPUT_MULTIPLE,
        });
    }
    if input.channels() != cfg.input_channels {
        return Err(Error::ChannelMismatch {
            layer: "input".into(),
            expected: cfg.input_channels,
            actual: input.channels(),
        });
    }
    let min = cfg.min_input_side();
    if h < min || w < min {
        return Err(Error::Input(alloc::format!(
            "input is {h}x{w} but this network needs at least {min}x{min}"
        )));
    }
    Ok(())
}

fn run<T: Real>(params: &ModelParameters<T>, input: &Tensor<T>, keep: bool) -> Result<(ForwardOutputs<T>, Option<Trace<T>>)> {
    check_input(params, input)?;
    let arch = &params.arch;
    let p = &params.tensors;
    let mut shared_c = Vec::new();
    let shared = run_convs(&arch.shared, p, input.clone(), keep.then_some(&mut shared_c));

    let mut prior_out = None;
    let mut prior_trace = None;
    if let Some(stage) = &arch.prior {
        let mut convs = Vec::new();
        let feat = run_convs(&stage.convs, p, shared.clone(), keep.then_some(&mut convs));
        let (pooled, spp_arg) = spp_forward(&feat, &stage.levels)?;
        let mut dense = Vec::new();
        let mut v = pooled.clone();
        for layer in &stage.dense {
            let (y, cache) = dense_forward(layer, p, v, keep);
            dense.extend(cache);
            v = y;
        }
        let probs = softmax(&v);
        if keep {
            prior_trace = Some(PriorTrace {
                convs,
                feat_dims: (feat.channels(), feat.height(), feat.width()),
                spp_arg,
                dense,
            });
        }
        prior_out = Some((v, probs, feat, pooled));
    }

    let mut density_c = Vec::new();
    let dens = run_convs(&arch.density, p, shared, keep.then_some(&mut density_c));
    let dens_channels = dens.channels();
    let fused_in = match &prior_out {
        Some((_, _, feat, _)) => dens.concat_channels(feat),
        None => dens,
    };
    let mut fusion_c = Vec::new();
    let mut x = run_convs(&arch.fusion, p, fused_in, keep.then_some(&mut fusion_c));
    let mut upsample = Vec::new();
    for layer in &arch.upsample {
        let (y, cache) = deconv_forward(layer, p, x, keep);
        upsample.extend(cache);
        x = y;
    }
    let (density, output) = conv_forward(&arch.output, p, x, keep);

    let trace = output.map(|output| Trace {
        shared: shared_c,
        prior: prior_trace,
        density: density_c,
        density_c: dens_channels,
        fusion: fusion_c,
        upsample,
        output,
    });
    let (class_scores, class_probs, prior_features, spp_features) = match prior_out {
        Some((s, pr, f, v)) => (Some(s), Some(pr), Some(f), Some(v)),
        None => (None, None, None, None),
    };
    Ok((
        ForwardOutputs {
            class_scores,
            class_probs,
            prior_features,
            spp_features,
            density,
        },
        trace,
    ))
}

/// Evaluates the network on an input whose sides are multiples of four
/// (see [`pad_input`]).
pub fn forward<T: Real>(params: &ModelParameters<T>, input: &Tensor<T>) -> Result<ForwardOutputs<T>> {
    run(params, input, false).map(|(out, _)| out)
}

/// Pads a grayscale image, runs the network and crops the density back to
/// the image size.
pub fn predict_density<T: Real>(params: &ModelParameters<T>, image: &GrayImage) -> Result<ForwardOutputs<T>> {
    let (padded, (h, w)) = pad_input(&image.to_tensor::<T>());
    let mut out = forward(params, &padded)?;
    out.density = out.density.crop(h, w);
    Ok(out)
}

/// Accumulates parameter gradients given the loss gradients with respect to
/// the (padded) density output and the class scores.
fn backward<T: Real>(
    params: &ModelParameters<T>,
    trace: &Trace<T>,
    d_density: Tensor<T>,
    d_scores: Option<Vec<T>>,
    grads: &mut [Vec<T>],
) {
    let arch = &params.arch;
    let p = &params.tensors;
    let mut g = conv_backward(&arch.output, p, &trace.output, d_density, grads, true).expect("input gradient requested");
    for (layer, cache) in arch.upsample.iter().zip(&trace.upsample).rev() {
        g = deconv_backward(layer, p, cache, g, grads);
    }
    for (layer, cache) in arch.fusion.iter().zip(&trace.fusion).rev() {
        g = conv_backward(layer, p, cache, g, grads, true).expect("input gradient requested");
    }
    let (mut g_dens, g_prior) = if arch.prior.is_some() {
        let (a, b) = g.split_channels(trace.density_c);
        (a, Some(b))
    } else {
        (g, None)
    };
    for (layer, cache) in arch.density.iter().zip(&trace.density).rev() {
        g_dens = conv_backward(layer, p, cache, g_dens, grads, true).expect("input gradient requested");
    }
    let mut g_shared = g_dens;

    if let (Some(stage), Some(pt)) = (&arch.prior, &trace.prior) {
        let mut gv = d_scores.unwrap_or_else(|| vec![T::zero(); params.config().classes()]);
        for (layer, cache) in stage.dense.iter().zip(&pt.dense).rev() {
            gv = dense_backward(layer, p, cache, gv, grads);
        }
        let (c, h, w) = pt.feat_dims;
        let mut gf = spp_backward(&gv, &pt.spp_arg, c, h, w);
        if let Some(extra) = g_prior {
            gf.data_mut().iter_mut().zip(extra.data()).for_each(|(a, &b)| *a += b);
        }
        for (layer, cache) in stage.convs.iter().zip(&pt.convs).rev() {
            gf = conv_backward(layer, p, cache, gf, grads, true).expect("input gradient requested");
        }
        g_shared.data_mut().iter_mut().zip(gf.data()).for_each(|(a, &b)| *a += b);
    }

    let n = arch.shared.len();
    for (i, (layer, cache)) in arch.shared.iter().zip(&trace.shared).enumerate().rev() {
        match conv_backward(layer, p, cache, g_shared.clone(), grads, i > 0) {
            Some(next) => g_shared = next,
            None => debug_assert_eq!(i, 0, "{n} shared layers"),
        }
    }
}

/// Per-sample loss components, before batch averaging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// Weighted classification NLL; zero for a single-stage network.
    pub classification: f64,
    pub density: f64,
}

impl LossBreakdown {
    pub fn total(&self, lambda: f64) -> f64 {
        unified_loss(self.classification, self.density, lambda)
    }
}

/// One training example in network precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    /// Input of any size at least 16x16; padded internally.
    pub image: Tensor<T>,
    /// Target density with the image's height and width.
    pub target: Tensor<T>,
    pub label: CountGroupLabel,
}

/// Computes the loss of one sample and adds `scale` times its gradient to
/// `grads`.
///
/// The density loss is taken over the unpadded region only. A batch mean is
/// obtained by calling this once per sample with `scale = 1 / batch`.
pub fn loss_and_gradients<T: Real>(
    params: &ModelParameters<T>,
    sample: &Sample<T>,
    losses: &LossConfig,
    scale: T,
    grads: &mut Gradients<T>,
) -> Result<LossBreakdown> {
    let (h, w) = (sample.image.height(), sample.image.width());
    if (sample.target.height(), sample.target.width()) != (h, w) || sample.target.channels() != 1 {
        return Err(Error::Input(alloc::format!(
            "target density is {}x{}x{} but the image is {h}x{w}",
            sample.target.channels(),
            sample.target.height(),
            sample.target.width()
        )));
    }
    let (padded, _) = pad_input(&sample.image);
    let (out, trace) = run(params, &padded, true)?;
    let trace = trace.expect("trace requested");

    let pred = out.density.crop(h, w);
    let (ld, gd) = density_term(pred.data(), sample.target.data(), losses.density_loss_normalization);
    let mut d_density = Tensor::from_vec(1, h, w, gd).zero_pad_to(padded.height(), padded.width());
    d_density.data_mut().iter_mut().for_each(|v| *v *= scale);

    let mut lc = T::zero();
    let d_scores = match &out.class_probs {
        Some(probs) => {
            let label = sample.label.class_index;
            if label >= probs.len() || label >= losses.class_weights.len() {
                return Err(Error::Input(alloc::format!(
                    "group label {label} is outside the {} classes",
                    probs.len()
                )));
            }
            let (loss, g) = classification_term(probs, label, losses.class_weights.get(label));
            lc = loss;
            let k = T::of(losses.lambda) * scale;
            Some(g.into_iter().map(|v| v * k).collect())
        }
        None => None,
    };
    backward(params, &trace, d_density, d_scores, &mut grads.tensors);
    Ok(LossBreakdown {
        classification: lc.to_f64().unwrap_or(f64::NAN),
        density: ld.to_f64().unwrap_or(f64::NAN),
    })
}

/// Loss of one sample without gradients.
pub fn sample_loss<T: Real>(params: &ModelParameters<T>, sample: &Sample<T>, losses: &LossConfig) -> Result<LossBreakdown> {
    let (h, w) = (sample.image.height(), sample.image.width());
    let (padded, _) = pad_input(&sample.image);
    let out = forward(params, &padded)?;
    let pred = out.density.crop(h, w);
    if pred.data().len() != sample.target.data().len() {
        return Err(Error::Input("target density does not match the image size".into()));
    }
    let (ld, _) = density_term(pred.data(), sample.target.data(), losses.density_loss_normalization);
    let lc = match &out.class_probs {
        Some(probs) => {
            let label = sample.label.class_index;
            if label >= probs.len() || label >= losses.class_weights.len() {
                return Err(Error::Input(alloc::format!("group label {label} is outside the {} classes", probs.len())));
            }
            classification_term(probs, label, losses.class_weights.get(label)).0
        }
        None => T::zero(),
    };
    Ok(LossBreakdown {
        classification: lc.to_f64().unwrap_or(f64::NAN),
        density: ld.to_f64().unwrap_or(f64::NAN),
    })
}

/// Tensor indices of the fully connected classifier, which only feeds `L_c`.
pub(crate) fn classifier_tensors<T>(params: &ModelParameters<T>) -> Vec<usize> {
    let Some(stage) = &params.arch.prior else { return Vec::new() };
    stage
        .dense
        .iter()
        .flat_map(|l| [Some(l.weight), Some(l.bias), l.slope])
        .flatten()
        .collect()
}

/// `L_c` from pooled prior features, skipping the convolutional layers.
pub(crate) fn classifier_loss<T: Real>(params: &ModelParameters<T>, pooled: &[T], label: usize, losses: &LossConfig) -> Result<f64> {
    let stage = params.arch.prior.as_ref().ok_or_else(|| Error::Input("network has no classifier".into()))?;
    let mut v = pooled.to_vec();
    for layer in &stage.dense {
        v = dense_forward(layer, &params.tensors, v, false).0;
    }
    let probs = softmax(&v);
    if label >= probs.len() || label >= losses.class_weights.len() {
        return Err(Error::Input(alloc::format!("group label {label} is outside the {} classes", probs.len())));
    }
    Ok(classification_term(&probs, label, losses.class_weights.get(label)).0.to_f64().unwrap_or(f64::NAN))
}
