use cmtl::checkpoint::{self, load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint, FORMAT_VERSION};
use cmtl::dataset::{load_manifest, write_manifest};
use cmtl::dmap::{self, read_dmap, write_dmap};
use cmtl::render::{render_density, to_rgb};
use cmtl::reports::{load_config, read_history, read_report, write_history, write_json};
use cmtl::Error;
use cmtl_core::data::{fit_group_boundaries, synthesize_dataset};
use cmtl_core::ground_truth::generate_density_map;
use cmtl_core::model::{build_model, forward, NetworkConfig};
use cmtl_core::train::{EpochRecord, EvaluationReport, ExperimentConfig, ImageCount};
use cmtl_core::{DensityMap, GroundTruthConfig, HeadAnnotations, Point, Tensor};
use proptest::prelude::*;

fn checkpoint(single_stage: bool) -> Checkpoint {
    let cfg = NetworkConfig::tiny().with_single_stage(single_stage);
    Checkpoint {
        params: build_model(&cfg, 17).unwrap(),
        boundaries: Some(fit_group_boundaries(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 3).unwrap()),
    }
}

#[test]
fn checkpoint_round_trip_keeps_forward_outputs_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ckpt = checkpoint(false);
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, ckpt);
    let x = Tensor::from_vec(1, 32, 28, (0..32 * 28).map(|i| (i % 17) as f32 / 17.0).collect());
    let a = forward(&ckpt.params, &x).unwrap();
    let b = forward(&loaded.params, &x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn damaged_checkpoints_fail_to_load() {
    let bytes = checkpoint::to_bytes(&checkpoint(false));
    let mut bad_magic = bytes.clone();
    bad_magic[..4].copy_from_slice(b"NOPE");
    assert!(checkpoint::from_bytes(&bad_magic).unwrap_err().contains("magic"));

    let mut bad_version = bytes.clone();
    bad_version[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(checkpoint::from_bytes(&bad_version).unwrap_err().contains("version"));

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut trailing = bytes;
    trailing.push(0);
    assert!(checkpoint::from_bytes(&trailing).is_err());
}

#[test]
fn single_stage_checkpoint_does_not_load_as_a_cascade() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("single.ckpt");
    save_checkpoint(&path, &checkpoint(true)).unwrap();
    let err = load_checkpoint_as(&path, &NetworkConfig::tiny()).unwrap_err();
    match err {
        Error::Core(cmtl_core::Error::ShapeMismatch { name, .. }) => assert_eq!(name, "prior.conv0.weight"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn single_stage_checkpoints_hold_no_prior_tensors() {
    let bytes = checkpoint::to_bytes(&checkpoint(true));
    let needle = b"prior.";
    assert!(!bytes.windows(needle.len()).any(|w| w == needle));
}

#[test]
fn missing_files_name_the_path() {
    let err = load_checkpoint(std::path::Path::new("/nonexistent/m.ckpt")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/m.ckpt"));
}

proptest! {
    #[test]
    fn dmap_round_trips_single_precision_maps(
        (h, w, data) in (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), prop::collection::vec(-1e3f32..1e3, h * w))
        })
    ) {
        let map = DensityMap::from_vec(h, w, data.iter().map(|&v| v as f64).collect()).unwrap();
        let back = dmap::from_bytes(&dmap::to_bytes(&map)).unwrap();
        prop_assert_eq!(back, map);
    }
}

#[test]
fn rendering_writes_png_and_bit_exact_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let heads = HeadAnnotations::new(vec![Point::new(20.5, 12.5)]);
    let map = generate_density_map((32, 40), &heads, &GroundTruthConfig::new(2.0)).unwrap();
    // Only single-precision values survive the sidecar exactly.
    let map = DensityMap::from_vec(32, 40, map.data().iter().map(|&v| v as f32 as f64).collect()).unwrap();
    let png = dir.path().join("head.png");
    let sidecar = render_density(&map, &png).unwrap();
    assert_eq!(read_dmap(&sidecar).unwrap(), map);
    let img = image::open(&png).unwrap().into_rgb8();
    assert_eq!(img.dimensions(), (40, 32));
    // The brightest pixel sits on the head.
    let brightest = img
        .enumerate_pixels()
        .max_by_key(|(_, _, p)| p.0.iter().map(|&c| c as u32).sum::<u32>())
        .map(|(x, y, _)| (x, y))
        .unwrap();
    assert_eq!(brightest, (20, 12));
}

#[test]
fn zero_map_renders_black() {
    let img = to_rgb(&DensityMap::zeros(8, 8));
    assert!(img.pixels().all(|p| p.0 == [0, 0, 0]));
}

#[test]
fn dmap_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.dmap");
    let map = DensityMap::from_vec(2, 2, vec![0.25, 0.0, -1.5, 3.0]).unwrap();
    write_dmap(&path, &map).unwrap();
    assert_eq!(read_dmap(&path).unwrap(), map);
}

#[test]
fn manifest_round_trip_keeps_heads_and_quantizes_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let images = synthesize_dataset(3, (24, 20), (1, 6), 1.5, 5).unwrap();
    let path = write_manifest(dir.path(), &images).unwrap();
    let loaded = load_manifest(&path).unwrap();
    assert_eq!(loaded.len(), 3);
    for (a, b) in images.iter().zip(&loaded) {
        assert_eq!(a.id(), b.id());
        assert_eq!(a.heads(), b.heads());
        assert_eq!((b.image().height(), b.image().width()), (24, 20));
        for (p, q) in a.image().pixels().iter().zip(b.image().pixels()) {
            assert!((p - q).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn manifest_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    std::fs::write(&path, r#"[{"id": "a", "image": "missing.png", "heads": []}]"#).unwrap();
    let err = load_manifest(&path).unwrap_err();
    assert!(err.to_string().contains("missing.png"), "{err}");
    std::fs::write(&path, "{").unwrap();
    assert!(load_manifest(&path).unwrap_err().to_string().contains("manifest.json"));
}

#[test]
fn out_of_bounds_heads_are_rejected_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let images = synthesize_dataset(1, (16, 16), (0, 0), 1.0, 0).unwrap();
    let path = write_manifest(dir.path(), &images).unwrap();
    let text = std::fs::read_to_string(&path).unwrap().replace("\"heads\": []", "\"heads\": [[40.0, 3.0]]");
    std::fs::write(&path, text).unwrap();
    assert!(load_manifest(&path).is_err());
}

#[test]
fn history_and_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let history = vec![
        EpochRecord { epoch: 1, loss: 0.5, classification: 2.0, density: 0.4998 },
        EpochRecord { epoch: 2, loss: 0.25, classification: 1.0, density: 0.2499 },
    ];
    let csv = dir.path().join("history.csv");
    write_history(&csv, &history).unwrap();
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("epoch,L,L_c,L_d\n"));
    assert_eq!(read_history(&csv).unwrap(), history);

    let report = EvaluationReport::from_counts(vec![ImageCount { id: "a".into(), true_count: 3.0, estimated_count: 2.5 }]).unwrap();
    let path = dir.path().join("report.json");
    write_json(&path, &report).unwrap();
    assert_eq!(read_report(&path).unwrap(), report);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert!(v["per_image"].is_array() && v["mae"].is_number() && v["mse"].is_number());
}

#[test]
fn config_files_accept_bare_training_settings() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.json");
    std::fs::write(&path, r#"{"learning_rate": 0.002, "epochs": 3, "batch_size": 4, "lambda": 0.0001, "seed": 9}"#).unwrap();
    let cfg = load_config(&path, ExperimentConfig::desk_scale()).unwrap();
    assert_eq!(cfg.training.learning_rate, 0.002);
    assert_eq!(cfg.training.adam_beta1, 0.9);
    assert_eq!(cfg.network, NetworkConfig::tiny());

    let full = dir.path().join("exp.json");
    write_json(&full, &ExperimentConfig::desk_scale()).unwrap();
    assert_eq!(load_config(&full, ExperimentConfig::default()).unwrap(), ExperimentConfig::desk_scale());

    std::fs::write(&path, r#"{"batch_size": 0}"#).unwrap();
    assert!(load_config(&path, ExperimentConfig::default()).is_err());
}
