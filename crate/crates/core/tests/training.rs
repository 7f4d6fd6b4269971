use cmtl_core::data::{synthesize_dataset, PatchConfig};
use cmtl_core::model::{build_model, NetworkConfig};
use cmtl_core::train::{
    cross_validate, evaluate, fit_and_train, fold_assignment, EvaluationReport, ExperimentConfig, ImageCount,
};
use proptest::prelude::*;

fn quick() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk_scale();
    cfg.training.epochs = 2;
    cfg.patches = PatchConfig {
        crops: 3,
        ..PatchConfig::default()
    };
    cfg.patches_per_image = Some(4);
    cfg
}

#[test]
fn evaluation_ignores_image_order() {
    let images = synthesize_dataset(6, (32, 28), (0, 10), 1.5, 3).unwrap();
    let params = build_model::<f32>(&NetworkConfig::tiny(), 1).unwrap();
    let a = evaluate(&params, &images).unwrap();
    let mut reversed = images.clone();
    reversed.reverse();
    let b = evaluate(&params, &reversed).unwrap();
    assert_eq!((a.mae, a.mse, a.n), (b.mae, b.mse, b.n));
    assert!(evaluate(&params, &[]).is_err());
}

#[test]
fn training_lowers_the_loss() {
    let images = synthesize_dataset(12, (32, 32), (0, 12), 1.5, 4).unwrap();
    let mut cfg = quick();
    cfg.training.epochs = 6;
    let trained = fit_and_train(&images, &cfg).unwrap();
    let first = trained.history.first().unwrap().loss;
    let last = trained.history.last().unwrap().loss;
    assert!(last < first, "{first} -> {last}");
    assert_eq!(trained, fit_and_train(&images, &cfg).unwrap());
}

#[test]
fn cross_validation_holds_out_each_image_once() {
    let images = synthesize_dataset(6, (32, 32), (0, 6), 1.5, 5).unwrap();
    let cv = cross_validate(&images, 3, &quick()).unwrap();
    assert_eq!(cv.folds.len(), 3);
    assert!(cv.folds.iter().all(|f| f.n == 2));
    let mut ids: Vec<_> = cv.aggregate.per_image.iter().map(|c| c.id.clone()).collect();
    ids.sort();
    let mut want: Vec<_> = images.iter().map(|i| i.id().to_string()).collect();
    want.sort();
    assert_eq!(ids, want);
    assert!(cross_validate(&images[..2], 3, &quick()).is_err());
}

#[test]
fn leave_one_out_folds() {
    let folds = fold_assignment(5, 5, 9).unwrap();
    let mut sorted = folds.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
}

#[test]
fn ablation_trains_a_network_without_the_prior_stage() {
    let images = synthesize_dataset(4, (32, 32), (0, 6), 1.5, 6).unwrap();
    let mut cfg = quick();
    cfg.training.ablation_single_stage = true;
    let trained = fit_and_train(&images, &cfg).unwrap();
    assert!(trained.params.config().single_stage);
    assert!(trained.params.named().all(|t| !t.name.starts_with("prior.")));
    assert!(trained.history.iter().all(|r| r.classification == 0.0));
}

proptest! {
    #[test]
    fn rmse_dominates_mae(errors in prop::collection::vec((0.0..1e3f64, -1e2..1e2f64), 1..50)) {
        let counts = errors
            .iter()
            .enumerate()
            .map(|(i, &(t, e))| ImageCount { id: i.to_string(), true_count: t, estimated_count: t + e })
            .collect();
        let r = EvaluationReport::from_counts(counts).unwrap();
        prop_assert!(r.mae >= 0.0);
        prop_assert!(r.mse >= r.mae * (1.0 - 1e-12));
    }
}
