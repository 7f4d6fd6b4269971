//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use cmtl::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use cmtl::dataset::write_manifest;
use cmtl_core::data::{
    fit_group_boundaries, make_patches, synthesize_dataset, Augmentation, ClassWeights, CountGroupLabel,
    DotAnnotatedImage, GrayImage, PatchConfig,
};
use cmtl_core::ground_truth::generate_density_map;
use cmtl_core::model::{build_model, check_gradients, forward, GradCheckOptions, NetworkConfig, Sample};
use cmtl_core::objectives::LossConfig;
use cmtl_core::train::{
    build_patches, classification_accuracy, constant_mean_baseline, evaluate, fit_and_train, EvaluationReport,
    ExperimentConfig, ImageCount,
};
use cmtl_core::{GroundTruthConfig, HeadAnnotations, Point, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(limit: Duration, took: Duration) -> bool {
    took <= limit
}

fn mass_conservation() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(32..=128), rng.gen_range(32..=128));
        let n = rng.gen_range(0..=50);
        let sigma = if rng.gen_bool(0.5) { 2.0 } else { 4.0 };
        let heads = HeadAnnotations::new(
            (0..n)
                .map(|_| Point::new(rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)))
                .collect(),
        );
        let map = generate_density_map((h, w), &heads, &GroundTruthConfig::new(sigma)).unwrap();
        let mass: f64 = map.data().iter().sum();
        worst = worst.max((mass - n as f64).abs() / (n as f64).max(1.0));
    }
    let took = start.elapsed();
    outcome(
        worst < 1e-3 && within(Duration::from_secs(10), took),
        format!("max |sum - count| / max(1, count) = {worst:.2e} (< 1e-3) in {took:.2?} (< 10 s)"),
    )
}

fn metric_oracle() -> Outcome {
    let counts = |y: &[f64], e: &[f64]| {
        y.iter()
            .zip(e)
            .enumerate()
            .map(|(i, (&t, &p))| ImageCount {
                id: i.to_string(),
                true_count: t,
                estimated_count: p,
            })
            .collect::<Vec<_>>()
    };
    let r = EvaluationReport::from_counts(counts(&[10.0, 20.0, 30.0], &[12.0, 17.0, 30.0])).unwrap();
    let exact = (r.mae - 1.6667).abs() <= 1e-4 && (r.mse - 2.0817).abs() <= 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..40);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..500.0)).collect();
        let e: Vec<f64> = y.iter().map(|v| v + rng.gen_range(-100.0..100.0)).collect();
        let r = EvaluationReport::from_counts(counts(&y, &e)).unwrap();
        if r.mse < r.mae {
            violations += 1;
        }
    }
    outcome(
        exact && violations == 0,
        format!(
            "MAE {:.4} (1.6667), MSE {:.4} (2.0817); MSE < MAE in {violations} of 1000 random reports",
            r.mae, r.mse
        ),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let params = build_model::<f64>(&NetworkConfig::tiny(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut draw = |n| (0..n).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<f64>>();
    let sample = Sample {
        image: Tensor::from_vec(1, 16, 16, draw(256)),
        target: Tensor::from_vec(1, 16, 16, draw(256)),
        label: CountGroupLabel { class_index: 3 },
    };
    let losses = LossConfig::new(1e-4, ClassWeights::uniform(10));
    let report = check_gradients(&params, &sample, &losses, &GradCheckOptions::default()).unwrap();
    let took = start.elapsed();
    let err = report.max_relative_error();
    let worst = report
        .tensors
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .map_or("-", |t| t.name.as_str());
    outcome(
        err < 1e-4 && within(Duration::from_secs(300), took),
        format!(
            "max relative error {err:.2e} (< 1e-4, worst {worst}) over all {} scalars of {} tensors in {took:.2?} (< 5 min)",
            report.checked(),
            report.tensors.len()
        ),
    )
}

fn shape_contracts() -> Outcome {
    let params = build_model::<f32>(&NetworkConfig::tiny(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut spp_lengths = Vec::new();
    let mut dims_ok = true;
    let mut worst_sum: f64 = 0.0;
    let mut sizes = Vec::new();
    for _ in 0..10 {
        let (h, w) = (4 * rng.gen_range(4..=32), 4 * rng.gen_range(4..=32));
        sizes.push(format!("{h}x{w}"));
        let x = Tensor::from_vec(1, h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect());
        let out = forward(&params, &x).unwrap();
        dims_ok &= (out.density.height(), out.density.width()) == (h, w);
        spp_lengths.push(out.spp_features.as_ref().unwrap().len());
        let sum: f64 = out.class_probs.as_ref().unwrap().iter().map(|&p| p as f64).sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
    }
    let constant = spp_lengths.windows(2).all(|p| p[0] == p[1]);
    outcome(
        dims_ok && constant && worst_sum <= 1e-6,
        format!(
            "sizes [{}]: density dims match {dims_ok}, SPP length {} constant {constant}, max |sum p - 1| {worst_sum:.1e}",
            sizes.join(" "),
            spp_lengths[0]
        ),
    )
}

fn augmentation_contract() -> Outcome {
    let images = synthesize_dataset(3, (64, 48), (5, 30), 2.0, 5).unwrap();
    let gt = GroundTruthConfig::default();
    let cfg = PatchConfig::default();
    let bounds = fit_group_boundaries(&(0..30).map(f64::from).collect::<Vec<_>>(), 10).unwrap();
    let mut ok = true;
    let mut splits = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let patches = make_patches(img, &gt, &cfg, &bounds, i as u64).unwrap();
        let n = |a| patches.iter().filter(|p| p.augmentation == a).count();
        let split = (n(Augmentation::None), n(Augmentation::Hflip), n(Augmentation::Noise));
        splits.push(format!("{}/{}/{}", split.0, split.1, split.2));
        ok &= patches.len() == 300 && split == (100, 100, 100);
        for k in 0..100 {
            let (orig, flip) = (&patches[k], &patches[100 + k]);
            ok &= flip.density == orig.density.flip_horizontal() && flip.image == orig.image.flip_horizontal();
        }
    }
    outcome(ok, format!("per-image splits {}; flipped densities are exact mirrors: {ok}", splits.join(", ")))
}

fn desk_scale_learning() -> Outcome {
    let start = Instant::now();
    let all = synthesize_dataset(250, (64, 64), (0, 50), 2.0, 7).unwrap();
    let (train, test) = all.split_at(200);
    let mut cfg = ExperimentConfig::desk_scale();
    cfg.training.seed = 7;
    assert!(cfg.training.epochs <= 30);

    let cascade = fit_and_train(train, &cfg).unwrap();
    let cascade_report = evaluate(&cascade.params, test).unwrap();
    let test_patches = build_patches(test, &cfg, &cascade.boundaries).unwrap();
    let accuracy = classification_accuracy(&cascade.params, &test_patches).unwrap();

    let mut ablated = cfg.clone();
    ablated.training.ablation_single_stage = true;
    let single = fit_and_train(train, &ablated).unwrap();
    let single_report = evaluate(&single.params, test).unwrap();

    let baseline = constant_mean_baseline(train, test).unwrap();
    let took = start.elapsed();
    let first = cascade.history.first().map_or(f64::NAN, |r| r.loss);
    let last = cascade.history.last().map_or(f64::NAN, |r| r.loss);

    let a = cascade_report.mae < 0.5 * baseline.mae;
    let b = accuracy > 0.25;
    let c = cascade_report.mae <= single_report.mae;
    let t = within(Duration::from_secs(15 * 60), took);
    outcome(
        a && b && c && t,
        format!(
            "(a) cascade MAE {:.3} vs baseline {:.3} [{}]; (b) test group accuracy {:.3} (> 0.25) [{}]; \
             (c) single-stage MAE {:.3} [{}]; cascade {}, single-stage {}; train L {first:.4} -> {last:.4} over {} epochs; {took:.0?} (< 15 min)",
            cascade_report.mae,
            baseline.mae,
            if a { "ok" } else { "FAIL" },
            accuracy,
            if b { "ok" } else { "FAIL" },
            single_report.mae,
            if c { "ok" } else { "FAIL" },
            cascade_report.table_row(),
            single_report.table_row(),
            cascade.history.len(),
        ),
    )
}

fn checkpoint_round_trip(dir: &Path) -> Outcome {
    let params = build_model::<f32>(&NetworkConfig::tiny(), 21).unwrap();
    let path = dir.join("model.ckpt");
    save_checkpoint(&path, &Checkpoint { params: params.clone(), boundaries: None }).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = Tensor::from_vec(1, 48, 40, (0..48 * 40).map(|_| rng.gen_range(0.0..1.0)).collect());
    let before = forward(&params, &x).unwrap();
    let after = forward(&loaded.params, &x).unwrap();
    let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    let same = bits(before.density.data()) == bits(after.density.data())
        && bits(before.class_scores.as_ref().unwrap()) == bits(after.class_scores.as_ref().unwrap())
        && before == after;
    outcome(same, format!("density and class outputs bit-identical after save/load: {same}"))
}

fn full_scale_hook(dir: &Path) -> Outcome {
    // A stand-in for a user-converted ShanghaiTech manifest: irregular image
    // sizes and a checkpoint of the full-width network.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let images: Vec<DotAnnotatedImage> = (0..3)
        .map(|i| {
            let (h, w) = (rng.gen_range(40..70), rng.gen_range(40..70));
            let img = GrayImage::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
            let heads = (0..rng.gen_range(0..20))
                .map(|_| Point::new(rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)))
                .collect();
            DotAnnotatedImage::new(format!("IMG_{}", i + 1), img, HeadAnnotations::new(heads)).unwrap()
        })
        .collect();
    let manifest = write_manifest(&dir.join("part_a"), &images).unwrap();
    let model = dir.join("full.ckpt");
    let params = build_model::<f32>(&NetworkConfig::default(), 1).unwrap();
    save_checkpoint(&model, &Checkpoint { params, boundaries: None }).unwrap();
    let report = dir.join("report.json");
    let out = Command::new(env!("CARGO_BIN_EXE_cmtl"))
        .args(["eval", "--model"])
        .arg(&model)
        .arg("--data")
        .arg(&manifest)
        .arg("--out")
        .arg(&report)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).trim().to_string();
    let row_ok = stdout
        .strip_prefix("MAE ")
        .and_then(|s| s.split_once(", MSE "))
        .is_some_and(|(mae, mse)| {
            [mae, mse]
                .iter()
                .all(|v| v.parse::<f64>().is_ok() && v.split_once('.').is_some_and(|(_, f)| f.len() == 1))
        });
    let parsed = cmtl::reports::read_report(&report).is_ok();
    outcome(
        out.status.success() && row_ok && parsed,
        format!("`cmtl eval` printed `{stdout}` and wrote a JSON report: {parsed}"),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("1 ground-truth mass conservation", Box::new(mass_conservation)),
        ("2 metric oracle", Box::new(metric_oracle)),
        ("3 gradient check", Box::new(gradient_check)),
        ("4 shape and SPP contracts", Box::new(shape_contracts)),
        ("5 augmentation contract", Box::new(augmentation_contract)),
        ("6 desk-scale learning", Box::new(desk_scale_learning)),
        ("7 checkpoint round-trip", Box::new(|| checkpoint_round_trip(dir.path()))),
        ("8 full-scale eval hook", Box::new(|| full_scale_hook(dir.path()))),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        failed += usize::from(!o.pass);
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
