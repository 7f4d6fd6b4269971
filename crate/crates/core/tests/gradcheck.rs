use cmtl_core::data::{ClassWeights, CountGroupLabel};
use cmtl_core::model::{build_model, check_gradients, GradCheckOptions, NetworkConfig, Sample};
use cmtl_core::objectives::{DensityNormalization, LossConfig};
use cmtl_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample(seed: u64, h: usize, w: usize) -> Sample<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n| (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    Sample {
        image: Tensor::from_vec(1, h, w, draw(h * w)),
        target: Tensor::from_vec(1, h, w, draw(h * w)),
        label: CountGroupLabel { class_index: 3 },
    }
}

fn sampled() -> GradCheckOptions {
    GradCheckOptions {
        max_entries_per_tensor: Some(12),
        ..GradCheckOptions::default()
    }
}

#[test]
fn cascade_gradients_match_central_differences() {
    let params = build_model::<f64>(&NetworkConfig::tiny(), 11).unwrap();
    let losses = LossConfig::new(1e-4, ClassWeights::uniform(10));
    let report = check_gradients(&params, &sample(12, 16, 16), &losses, &sampled()).unwrap();
    assert!(report.tensors.iter().any(|t| t.name.ends_with(".slope")));
    assert!(report.max_relative_error() < 1e-4, "{report:?}");
}

#[test]
fn classification_heavy_loss_is_differentiated_correctly() {
    // A large lambda makes the classifier branch dominate the shared layers.
    let params = build_model::<f64>(&NetworkConfig::tiny(), 2).unwrap();
    let weights = ClassWeights::new((1..=10).map(|i| i as f64 / 5.5).collect()).unwrap();
    let losses = LossConfig::new(10.0, weights);
    let report = check_gradients(&params, &sample(5, 20, 16), &losses, &sampled()).unwrap();
    assert!(report.max_relative_error() < 1e-4, "{report:?}");
}

#[test]
fn single_stage_and_norm_loss_gradients() {
    let params = build_model::<f64>(&NetworkConfig::tiny().with_single_stage(true), 4).unwrap();
    let mut losses = LossConfig::new(1e-4, ClassWeights::uniform(10));
    losses.density_loss_normalization = DensityNormalization::PerImageSum;
    // 18x18 exercises the pad-and-crop path.
    let report = check_gradients(&params, &sample(8, 18, 18), &losses, &sampled()).unwrap();
    assert!(report.tensors.iter().all(|t| !t.name.starts_with("prior.")));
    assert!(report.max_relative_error() < 1e-4, "{report:?}");
}

#[test]
fn wide_networks_are_refused() {
    let params = build_model::<f64>(&NetworkConfig::tiny().with_width(0.5), 0).unwrap();
    let losses = LossConfig::new(1e-4, ClassWeights::uniform(10));
    let err = check_gradients(&params, &sample(0, 16, 16), &losses, &sampled()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}
