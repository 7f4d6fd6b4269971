//! Adam training, count metrics, cross-validation and the end-to-end
//! experiment driver.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    compute_class_weights, derive_seed, fit_group_boundaries, make_patches, patch_counts, uniform_group_boundaries,
    ClassWeights, DotAnnotatedImage, GroupBoundaries, PatchConfig, TrainingPatch, DEFAULT_GROUPS,
};
use crate::error::{Error, Result};
use crate::ground_truth::GroundTruthConfig;
use crate::model::{build_model, loss_and_gradients, predict_density, Gradients, ModelParameters, NetworkConfig, Sample};
use crate::objectives::{DensityNormalization, LossConfig, DEFAULT_LAMBDA};
use crate::tensor::{Real, Tensor};

// Independent random streams derived from the experiment seed.
const STREAM_MODEL: u64 = 1 << 32;
const STREAM_SHUFFLE: u64 = 2 << 32;
const STREAM_SUBSAMPLE: u64 = 3 << 32;
const STREAM_FOLDS: u64 = 4 << 32;
const STREAM_PATCHES: u64 = 5 << 32;

fn default_lr() -> f64 {
    1e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_epsilon() -> f64 {
    1e-8
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_epsilon")]
    pub adam_epsilon: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ablation_single_stage: bool,
    /// Epochs between checkpoints; 0 disables them.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_epsilon: default_adam_epsilon(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            lambda: default_lambda(),
            seed: 0,
            ablation_single_stage: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Config(format!("adam_epsilon must be positive, got {}", self.adam_epsilon)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Per-epoch means over all training samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Unified loss `lambda * L_c + L_d`.
    pub loss: f64,
    pub classification: f64,
    pub density: f64,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: i32,
}

impl<T: Real> Adam<T> {
    fn new(params: &ModelParameters<T>) -> Self {
        let zeros = || params.named().map(|t| vec![T::zero(); t.data.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParameters<T>, grads: &Gradients<T>, cfg: &TrainingConfig) {
        self.step += 1;
        let (b1, b2) = (T::of(cfg.adam_beta1), T::of(cfg.adam_beta2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let lr = T::of(cfg.learning_rate);
        let eps = T::of(cfg.adam_epsilon);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads.tensors()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p[i] -= lr * update;
            }
        }
    }
}

/// What the trainer reports after each epoch.
#[derive(Debug)]
pub struct EpochEvent<'a, T> {
    pub record: EpochRecord,
    pub params: &'a ModelParameters<T>,
    /// True when `checkpoint_every` asks for a checkpoint at this epoch.
    pub checkpoint_due: bool,
}

/// Converts a patch into network precision.
pub fn patch_sample<T: Real>(patch: &TrainingPatch) -> Sample<T> {
    let d = &patch.density;
    Sample {
        image: patch.image.to_tensor(),
        target: Tensor::from_vec(1, d.height(), d.width(), d.data().iter().map(|&v| T::of(v)).collect()),
        label: patch.group_label,
    }
}

/// Trains with Adam; see [`train_with`].
pub fn train<T: Real>(
    model: ModelParameters<T>,
    patches: &[TrainingPatch],
    cfg: &TrainingConfig,
    losses: &LossConfig,
) -> Result<(ModelParameters<T>, Vec<EpochRecord>)> {
    train_with(model, patches, cfg, losses, |_| Ok(()))
}

/// Trains with Adam over shuffled mini-batches of equally sized patches,
/// calling `observer` after every epoch.
///
/// The loss configuration must agree with `cfg.lambda`, and the model must be
/// single-stage exactly when `cfg.ablation_single_stage` is set.
pub fn train_with<T: Real>(
    mut model: ModelParameters<T>,
    patches: &[TrainingPatch],
    cfg: &TrainingConfig,
    losses: &LossConfig,
    mut observer: impl FnMut(EpochEvent<'_, T>) -> Result<()>,
) -> Result<(ModelParameters<T>, Vec<EpochRecord>)> {
    cfg.validate()?;
    losses.validate()?;
    if patches.is_empty() {
        return Err(Error::Input("no training patches".into()));
    }
    if losses.lambda != cfg.lambda {
        return Err(Error::Config(format!(
            "loss lambda {} disagrees with the training lambda {}",
            losses.lambda, cfg.lambda
        )));
    }
    if model.config().single_stage != cfg.ablation_single_stage {
        return Err(Error::Config(format!(
            "ablation_single_stage is {} but the model is {}",
            cfg.ablation_single_stage,
            if model.config().single_stage { "single-stage" } else { "cascaded" }
        )));
    }

    let mut by_size: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in patches.iter().enumerate() {
        by_size.entry((p.image.height(), p.image.width())).or_default().push(i);
    }

    let mut adam = Adam::new(&model);
    let mut grads = Gradients::zeros_like(&model);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE + epoch as u64));
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for group in by_size.values() {
            let mut g = group.clone();
            g.shuffle(&mut rng);
            batches.extend(g.chunks(cfg.batch_size).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut rng);

        let (mut sum_c, mut sum_d) = (0.0, 0.0);
        for (b, batch) in batches.iter().enumerate() {
            grads.fill_zero();
            let scale = T::one() / T::of(batch.len() as f64);
            let (mut bc, mut bd) = (0.0, 0.0);
            for &i in batch {
                let l = loss_and_gradients(&model, &patch_sample(&patches[i]), losses, scale, &mut grads)?;
                bc += l.classification;
                bd += l.density;
            }
            let n = batch.len() as f64;
            if !(bc / n * cfg.lambda + bd / n).is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            if let Some(name) = grads.first_non_finite(&model) {
                return Err(Error::NonFiniteGradient(format!("{name} at epoch {epoch}, batch {}", b + 1)));
            }
            adam.update(&mut model, &grads, cfg);
            sum_c += bc;
            sum_d += bd;
        }
        let n = patches.len() as f64;
        let record = EpochRecord {
            epoch,
            loss: cfg.lambda * (sum_c / n) + sum_d / n,
            classification: sum_c / n,
            density: sum_d / n,
        };
        history.push(record);
        let checkpoint_due = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
        observer(EpochEvent {
            record,
            params: &model,
            checkpoint_due,
        })?;
    }
    Ok((model, history))
}

/// True and estimated count of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCount {
    pub id: String,
    pub true_count: f64,
    pub estimated_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_image: Vec<ImageCount>,
    /// Mean absolute count error.
    pub mae: f64,
    /// Root mean squared count error.
    pub mse: f64,
    pub n: usize,
}

impl EvaluationReport {
    pub fn from_counts(per_image: Vec<ImageCount>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Input("cannot evaluate an empty image list".into()));
        }
        // Sorting the errors makes the sums independent of image order.
        let mut errors: Vec<f64> = per_image.iter().map(|c| (c.true_count - c.estimated_count).abs()).collect();
        errors.sort_by(f64::total_cmp);
        let n = errors.len() as f64;
        let mae = errors.iter().sum::<f64>() / n;
        let mse = Float::sqrt(errors.iter().map(|e| e * e).sum::<f64>() / n);
        Ok(Self {
            n: per_image.len(),
            per_image,
            mae,
            mse,
        })
    }

    /// The report as a results-table row, e.g. `MAE 101.3, MSE 152.4`.
    pub fn table_row(&self) -> String {
        format!("MAE {:.1}, MSE {:.1}", self.mae, self.mse)
    }
}

/// Counts every image with the full network (padding and cropping as
/// needed) and scores the clamped density integrals.
pub fn evaluate<T: Real>(model: &ModelParameters<T>, images: &[DotAnnotatedImage]) -> Result<EvaluationReport> {
    let per_image = images
        .iter()
        .map(|img| {
            let out = predict_density(model, img.image())
                .map_err(|e| Error::Input(format!("image `{}`: {e}", img.id())))?;
            Ok(ImageCount {
                id: img.id().into(),
                true_count: img.count() as f64,
                estimated_count: out.count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvaluationReport::from_counts(per_image)
}

/// Scores a predictor that answers the mean training count for every image.
pub fn constant_mean_baseline(train: &[DotAnnotatedImage], test: &[DotAnnotatedImage]) -> Result<EvaluationReport> {
    if train.is_empty() {
        return Err(Error::Input("the baseline needs training images".into()));
    }
    let mean = train.iter().map(|i| i.count() as f64).sum::<f64>() / train.len() as f64;
    EvaluationReport::from_counts(
        test.iter()
            .map(|img| ImageCount {
                id: img.id().into(),
                true_count: img.count() as f64,
                estimated_count: mean,
            })
            .collect(),
    )
}

/// Fraction of patches whose most probable group is their label.
pub fn classification_accuracy<T: Real>(model: &ModelParameters<T>, patches: &[TrainingPatch]) -> Result<f64> {
    if patches.is_empty() {
        return Err(Error::Input("no patches to classify".into()));
    }
    let mut hits = 0usize;
    for p in patches {
        let out = predict_density(model, &p.image)?;
        let probs = out
            .class_probs
            .ok_or_else(|| Error::Config("a single-stage network has no classifier".into()))?;
        let best = probs
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > probs[b] { i } else { b });
        hits += usize::from(best == p.group_label.class_index);
    }
    Ok(hits as f64 / patches.len() as f64)
}

fn default_groups() -> usize {
    DEFAULT_GROUPS
}

/// Everything needed to go from annotated images to a trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub ground_truth: GroundTruthConfig,
    #[serde(default)]
    pub patches: PatchConfig,
    #[serde(default = "default_groups")]
    pub groups: usize,
    /// Keep a seeded random subset of this many patches per image.
    #[serde(default)]
    pub patches_per_image: Option<usize>,
    #[serde(default)]
    pub density_loss_normalization: DensityNormalization,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            training: TrainingConfig::default(),
            ground_truth: GroundTruthConfig::default(),
            patches: PatchConfig::default(),
            groups: DEFAULT_GROUPS,
            patches_per_image: None,
            density_loss_normalization: DensityNormalization::default(),
        }
    }
}

impl ExperimentConfig {
    /// Settings that train the quarter-width network on small synthetic
    /// crowds in minutes on one CPU core: a larger step, ten patches per
    /// image, narrow kernels and the unsquared Euclidean density loss, which
    /// leaves the per-pixel scale of tiny density values out of the gradient.
    pub fn desk_scale() -> Self {
        Self {
            network: NetworkConfig::tiny(),
            training: TrainingConfig {
                learning_rate: 1e-3,
                epochs: 8,
                batch_size: 8,
                ..TrainingConfig::default()
            },
            ground_truth: GroundTruthConfig::new(2.0),
            patches_per_image: Some(10),
            density_loss_normalization: DensityNormalization::PerImageSum,
            ..Self::default()
        }
    }

    /// The network actually built, honoring the ablation flag.
    pub fn effective_network(&self) -> NetworkConfig {
        self.network.clone().with_single_stage(self.training.ablation_single_stage)
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_network().validate()?;
        self.training.validate()?;
        self.ground_truth.validate()?;
        if self.groups != self.network.classes() {
            return Err(Error::Config(format!(
                "{} count groups but the classifier has {} outputs",
                self.groups,
                self.network.classes()
            )));
        }
        if self.patches_per_image == Some(0) {
            return Err(Error::Config("patches_per_image must be positive".into()));
        }
        Ok(())
    }
}

/// A trained network with the label space it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParameters<f32>,
    pub boundaries: GroupBoundaries,
    pub class_weights: ClassWeights,
    pub history: Vec<EpochRecord>,
}

/// Count-group boundaries fitted to the patch counts of `images`. A count
/// distribution without spread falls back to uniform groups.
pub fn fit_boundaries(images: &[DotAnnotatedImage], cfg: &ExperimentConfig) -> Result<GroupBoundaries> {
    let mut counts = Vec::new();
    for (i, img) in images.iter().enumerate() {
        counts.extend(patch_counts(img, &cfg.ground_truth, &cfg.patches, patch_seed(cfg, i))?);
    }
    match fit_group_boundaries(&counts, cfg.groups) {
        Err(Error::DegenerateDistribution { .. }) => {
            let max = counts.iter().copied().fold(0.0, f64::max);
            uniform_group_boundaries(max.max(cfg.groups as f64), cfg.groups)
        }
        other => other,
    }
}

fn patch_seed(cfg: &ExperimentConfig, image: usize) -> u64 {
    derive_seed(cfg.training.seed, STREAM_PATCHES + image as u64)
}

/// Augmented (and optionally subsampled) patches of every image, labeled
/// with `boundaries`.
pub fn build_patches(
    images: &[DotAnnotatedImage],
    cfg: &ExperimentConfig,
    boundaries: &GroupBoundaries,
) -> Result<Vec<TrainingPatch>> {
    let mut out = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let mut patches = make_patches(img, &cfg.ground_truth, &cfg.patches, boundaries, patch_seed(cfg, i))?;
        if let Some(k) = cfg.patches_per_image.filter(|&k| k < patches.len()) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.training.seed, STREAM_SUBSAMPLE + i as u64));
            let mut keep = index::sample(&mut rng, patches.len(), k).into_vec();
            keep.sort_unstable();
            patches = keep.into_iter().map(|j| patches[j].clone()).collect();
        }
        out.extend(patches);
    }
    Ok(out)
}

/// Fits group boundaries and class weights, builds the patches and the
/// network, and trains it.
pub fn fit_and_train(images: &[DotAnnotatedImage], cfg: &ExperimentConfig) -> Result<TrainedModel> {
    fit_and_train_with(images, cfg, |_| Ok(()))
}

pub fn fit_and_train_with(
    images: &[DotAnnotatedImage],
    cfg: &ExperimentConfig,
    observer: impl FnMut(EpochEvent<'_, f32>) -> Result<()>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Input("no training images".into()));
    }
    let boundaries = fit_boundaries(images, cfg)?;
    let patches = build_patches(images, cfg, &boundaries)?;
    let labels: Vec<_> = patches.iter().map(|p| p.group_label).collect();
    let class_weights = compute_class_weights(&labels, cfg.groups)?;
    let losses = LossConfig {
        lambda: cfg.training.lambda,
        class_weights: class_weights.clone(),
        density_loss_normalization: cfg.density_loss_normalization,
    };
    let model = build_model::<f32>(&cfg.effective_network(), derive_seed(cfg.training.seed, STREAM_MODEL))?;
    let (params, history) = train_with(model, &patches, &cfg.training, &losses, observer)?;
    Ok(TrainedModel {
        params,
        boundaries,
        class_weights,
        history,
    })
}

/// Fold index of each image: a seeded permutation dealt round-robin.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config(format!("cross-validation needs at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::Input(format!("{n} images cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_FOLDS)));
    let mut fold = vec![0; n];
    for (pos, &img) in order.iter().enumerate() {
        fold[img] = pos % k;
    }
    Ok(fold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<EvaluationReport>,
    /// Metrics over the pooled held-out errors of all folds.
    pub aggregate: EvaluationReport,
}

/// k-fold cross-validation: every image is held out exactly once.
pub fn cross_validate(images: &[DotAnnotatedImage], k: usize, cfg: &ExperimentConfig) -> Result<CrossValidation> {
    let assignment = fold_assignment(images.len(), k, cfg.training.seed)?;
    let mut folds = Vec::with_capacity(k);
    let mut pooled = Vec::with_capacity(images.len());
    for f in 0..k {
        let (test, train_set): (Vec<_>, Vec<_>) = images
            .iter()
            .zip(&assignment)
            .partition(|(_, &a)| a == f);
        let train_set: Vec<DotAnnotatedImage> = train_set.into_iter().map(|(i, _)| i.clone()).collect();
        let test: Vec<DotAnnotatedImage> = test.into_iter().map(|(i, _)| i.clone()).collect();
        let trained = fit_and_train(&train_set, cfg)?;
        let report = evaluate(&trained.params, &test)?;
        pooled.extend(report.per_image.iter().cloned());
        folds.push(report);
    }
    Ok(CrossValidation {
        folds,
        aggregate: EvaluationReport::from_counts(pooled)?,
    })
}
