use std::path::Path;

use rootskel::bundle::{write_scene, Bundle, BundleWriteOptions};
use rootskel::config::PipelineConfig;
use rootskel::error::{Error, ErrorKind};
use rootskel::fusion::adaptive_gate;
use rootskel::pipeline::{render_overlay, run_pipeline, run_stage, Stage};
use rootskel::synthetic::{NoiseSpec, RenderSpec, RootSystemSpec, Scene};

fn scene(seed: u64, noise: NoiseSpec) -> Scene {
    let root = RootSystemSpec { seed, lateral_count: [10, 16], ..RootSystemSpec::default() };
    Scene::synthesize(&root, &RenderSpec::default(), &noise).unwrap()
}

fn noisy(seed: u64) -> NoiseSpec {
    NoiseSpec { seed, keypoint_sigma: 0.7, pose_rotation_deg: 0.5, pose_translation_frac: 0.005, match_outlier_rate: 0.05, ..NoiseSpec::default() }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn bundle_round_trip() {
    let s = scene(1, noisy(1));
    let dir = tempfile::tempdir().unwrap();
    write_scene(&s, dir.path(), BundleWriteOptions::default()).unwrap();
    let b = Bundle::load(dir.path(), &PipelineConfig::default()).unwrap();
    assert_eq!(b.cameras, s.cameras);
    assert_eq!(b.masks, s.masks);
    assert_eq!(b.detections, s.detections);
    assert_eq!(b.truth.as_ref(), Some(&s.truth));
    assert_eq!(b.scene.as_ref().map(|x| &x.noise), Some(&s.noise));
}

#[test]
fn raw_grid_bundle_reconstructs_noiseless_scene() {
    let s = scene(2, NoiseSpec::default());
    let dir = tempfile::tempdir().unwrap();
    write_scene(&s, dir.path(), BundleWriteOptions { raw_grids: true, matches: true }).unwrap();
    let b = Bundle::load(dir.path(), &PipelineConfig::default()).unwrap();
    for (decoded, exact) in b.detections.iter().zip(&s.detections) {
        assert_eq!(decoded.len(), exact.len());
        // Every exact detection has a decoded twin, up to f32 storage error.
        for d in exact {
            assert!(decoded.iter().any(|x| x.start().distance(d.start()) < 0.01 && x.end().distance(d.end()) < 0.01));
        }
    }
    let out = tempfile::tempdir().unwrap();
    let result = run_pipeline(dir.path(), out.path(), &PipelineConfig::default()).unwrap();
    let m = result.metrics.unwrap();
    assert_eq!(m.precision_3d, 1.0);
    assert!(m.recall_3d >= 0.95);
}

#[test]
fn missing_matches_name_the_file() {
    let s = scene(3, NoiseSpec::default());
    let dir = tempfile::tempdir().unwrap();
    write_scene(&s, dir.path(), BundleWriteOptions { raw_grids: false, matches: false }).unwrap();
    let out = tempfile::tempdir().unwrap();
    let err = run_pipeline(dir.path(), out.path(), &PipelineConfig::default()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Io);
    let text = format!("{err}");
    assert!(text.contains("matches_0_1.json"), "{text}");

    // The oracle needs no match files.
    let cfg = PipelineConfig { oracle_matches: true, ..PipelineConfig::default() };
    run_pipeline(dir.path(), out.path(), &cfg).unwrap();
}

#[test]
fn staged_run_writes_the_same_bytes() {
    let s = scene(4, noisy(4));
    let bundle = tempfile::tempdir().unwrap();
    write_scene(&s, bundle.path(), BundleWriteOptions::default()).unwrap();
    let cfg = PipelineConfig::default();
    let single = tempfile::tempdir().unwrap();
    run_pipeline(bundle.path(), single.path(), &cfg).unwrap();
    let staged = tempfile::tempdir().unwrap();
    for stage in [Stage::Match, Stage::Triangulate, Stage::Sba, Stage::Connect, Stage::Evaluate, Stage::Export] {
        run_stage(stage, bundle.path(), staged.path(), &cfg).unwrap();
    }
    let (a, b) = (files(single.path()), files(staged.path()));
    assert_eq!(a.iter().map(|f| &f.0).collect::<Vec<_>>(), b.iter().map(|f| &f.0).collect::<Vec<_>>());
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        assert!(x == y, "{name} differs");
    }
    assert!(a.iter().any(|f| f.0 == "skeleton.json") && a.iter().any(|f| f.0 == "sba_trace.csv"));
}

#[test]
fn stage_without_its_inputs_reports_the_missing_file() {
    let s = scene(5, NoiseSpec::default());
    let bundle = tempfile::tempdir().unwrap();
    write_scene(&s, bundle.path(), BundleWriteOptions::default()).unwrap();
    let out = tempfile::tempdir().unwrap();
    match run_stage(Stage::Sba, bundle.path(), out.path(), &PipelineConfig::default()) {
        Err(Error::MissingInput(p)) => assert!(p.ends_with("laterals.json")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn overlay_is_written_after_a_run() {
    let s = scene(6, NoiseSpec::default());
    let bundle = tempfile::tempdir().unwrap();
    write_scene(&s, bundle.path(), BundleWriteOptions::default()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default();
    run_pipeline(bundle.path(), out.path(), &cfg).unwrap();
    let path = render_overlay(bundle.path(), out.path(), 1, &cfg).unwrap();
    assert!(std::fs::read_to_string(path).unwrap().starts_with("<svg"));
    assert!(render_overlay(bundle.path(), out.path(), 9, &cfg).is_err());
}

#[test]
fn invalid_config_is_a_validation_error() {
    let bad = PipelineConfig { schema_version: 99, ..PipelineConfig::default() };
    assert_eq!(bad.validate().unwrap_err().kind(), ErrorKind::Validation);
    assert!(PipelineConfig::from_json(r#"{"no_such_key": 1}"#).is_err());
    let cfg = PipelineConfig::from_json(r#"{"matching_threshold": 6}"#).unwrap();
    assert_eq!(cfg.matching_threshold, 6);
}

#[test]
fn gate_widens_with_the_median_error() {
    assert_eq!(adaptive_gate(&[], 4.0, 3.0), 4.0);
    assert_eq!(adaptive_gate(&[0.1, 0.2, 50.0], 4.0, 3.0), 4.0);
    assert_eq!(adaptive_gate(&[5.0, 1.0, 9.0, 7.0], 4.0, 3.0), 18.0);
    assert_eq!(adaptive_gate(&[5.0, 9.0, 7.0], 4.0, 0.0), 4.0);
    assert_eq!(adaptive_gate(&[f64::INFINITY, 2.0], 1.0, 2.0), 4.0);
}
