use gea_core::feature_store::ingest_manifest;
use gea_core::fixture::{make_fixture, FixtureConfig};
use gea_core::projection::project_2d;
use gea_core::reports::{omega_sweep, project_manifest, SweepRow};
use gea_core::retrieval::evaluate;
use gea_core::trainer::{Ablation, TrainConfig, Trainer};
use gea_core::Execution;

fn noise_free() -> FixtureConfig {
    FixtureConfig {
        noise: 0.0,
        train_identities: Some(32),
        ..FixtureConfig::desk(5)
    }
}

#[test]
fn default_fixture_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (fx, paths) = make_fixture(&FixtureConfig::default(), dir.path()).unwrap();
    assert_eq!(fx.test.len(), 128);
    assert_eq!(ingest_manifest(&paths.test).unwrap().num_identities(), 32);
}

#[test]
fn noise_free_fixture_is_separable_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let (fx, paths) = make_fixture(&noise_free(), dir.path()).unwrap();
    for r in &fx.test {
        assert_eq!(r.image.global(), r.text_feature.global());
    }
    let test = ingest_manifest(&paths.test).unwrap();
    let model = Trainer::for_manifest(TrainConfig::desk(Ablation::Full, 0), &test)
        .unwrap()
        .model;
    let r = evaluate(&test, &model, 0.0, false, Execution::Parallel).unwrap();
    assert_eq!(r.rank1, 100.0);
}

#[test]
fn sweep_at_zero_matches_plain_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let (_, paths) = make_fixture(&FixtureConfig::desk(2), dir.path()).unwrap();
    let test = ingest_manifest(&paths.test).unwrap();
    let model = Trainer::for_manifest(TrainConfig::desk(Ablation::Full, 0), &test)
        .unwrap()
        .model;
    let rows = omega_sweep(&test, &model, &[0.0], false, Execution::Parallel).unwrap();
    let base = evaluate(&test, &model, 0.0, false, Execution::Parallel).unwrap();
    assert_eq!(rows, vec![SweepRow::from(&base)]);
}

#[test]
fn planar_points_keep_their_distances() {
    let pts: Vec<Vec<f64>> = vec![
        vec![0.0, 0.0],
        vec![3.0, 1.0],
        vec![-1.0, 2.0],
        vec![4.0, -2.0],
        vec![0.5, 0.5],
    ];
    let p = project_2d(&pts).unwrap();
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    for i in 0..pts.len() {
        for j in 0..pts.len() {
            let orig = dist([pts[i][0], pts[i][1]], [pts[j][0], pts[j][1]]);
            assert!((dist(p.coords[i], p.coords[j]) - orig).abs() < 1e-10);
        }
    }
}

#[test]
fn fused_points_lie_between_text_and_image() {
    let dir = tempfile::tempdir().unwrap();
    let (_, paths) = make_fixture(&noise_free(), dir.path()).unwrap();
    let test = ingest_manifest(&paths.test).unwrap();
    let model = Trainer::for_manifest(TrainConfig::desk(Ablation::Full, 0), &test)
        .unwrap()
        .model;
    let omega = 0.35;
    let pts = project_manifest(&test, &model, omega, Execution::Parallel).unwrap();
    for chunk in pts.chunks(3) {
        let [img, txt, fused] = chunk else { unreachable!() };
        assert_eq!((img.modality.as_str(), txt.modality.as_str(), fused.modality.as_str()), ("image", "text", "fused"));
        for (i, t, f) in [(img.x, txt.x, fused.x), (img.y, txt.y, fused.y)] {
            let expect = (1.0 - omega) * t + omega * i;
            assert!((f - expect).abs() < 1e-9, "{f} vs {expect}");
            assert!(f >= i.min(t) - 1e-9 && f <= i.max(t) + 1e-9);
        }
    }
}
