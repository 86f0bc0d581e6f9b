use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use gea_core::feature_store::ingest_manifest;
use gea_core::fixture::{make_fixture, FixtureConfig};
use gea_core::flow_sampler::{generate_for_manifest, GenerationConfig};
use gea_core::reports::{mix_manifest, omega_sweep, project_manifest, sample_heatmap, Branch};
use gea_core::trainer::{fit, run_paths, Ablation, Checkpoint, FitOptions, TrainConfig, Trainer};
use gea_core::Execution;

fn small() -> FixtureConfig {
    FixtureConfig {
        num_identities: 6,
        train_identities: Some(8),
        texts_per_identity: 2,
        dim: 16,
        ..FixtureConfig::desk(11)
    }
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn fixture_directories_are_byte_identical_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    make_fixture(&small(), a.path()).unwrap();
    make_fixture(&small(), b.path()).unwrap();
    make_fixture(&FixtureConfig { seed: 12, ..small() }, c.path()).unwrap();
    let (sa, sb, sc) = (snapshot(a.path()), snapshot(b.path()), snapshot(c.path()));
    assert!(sa.len() > 3);
    assert_eq!(sa, sb);
    assert_ne!(sa, sc);
}

#[test]
fn reports_have_expected_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, paths) = make_fixture(&small(), dir.path()).unwrap();
    let test = ingest_manifest(&paths.test).unwrap();
    let model = Trainer::for_manifest(TrainConfig::desk(Ablation::Full, 0), &test)
        .unwrap()
        .model;

    let sweep = omega_sweep(&test, &model, &[0.0, 0.5, 1.0], false, Execution::Parallel).unwrap();
    assert_eq!(sweep.iter().map(|r| r.omega).collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);
    assert!(sweep.iter().all(|r| (0.0..=1.0).contains(&r.map)));

    let mixed = mix_manifest(&test, &model, 0.3, Execution::Parallel).unwrap();
    assert_eq!(mixed.len(), test.len());
    assert!(mixed.iter().all(|(_, _, v)| v.len() == 16));

    let points = project_manifest(&test, &model, 0.3, Execution::Parallel).unwrap();
    assert_eq!(points.len(), 3 * test.len());

    let w = sample_heatmap(&test, &model, &test.records[0].sample_id, Branch::Text).unwrap();
    for r in 0..w.rows() {
        let s: f64 = w.row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert!(sample_heatmap(&test, &model, "nope", Branch::Image).is_err());
}

#[test]
fn generated_manifest_loads_from_another_directory() {
    let fx = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let (_, paths) = make_fixture(&small(), fx.path()).unwrap();
    let test = ingest_manifest(&paths.test).unwrap();
    let cfg = GenerationConfig {
        steps: 4,
        ..GenerationConfig::default()
    };
    let path = generate_for_manifest(&test, &cfg, out.path(), Execution::Parallel).unwrap();
    let again = ingest_manifest(&path).unwrap();
    assert_eq!(again.len(), test.len());
    assert!(again.records.iter().all(|r| r.generated.is_some()));
}

#[test]
fn fit_writes_run_directory_and_checkpoint_reloads() {
    let fx = tempfile::tempdir().unwrap();
    let run = tempfile::tempdir().unwrap();
    let (_, paths) = make_fixture(&small(), fx.path()).unwrap();
    let train = ingest_manifest(&paths.train).unwrap();
    let val = ingest_manifest(&paths.val).unwrap();
    let mut cfg = TrainConfig::desk(Ablation::Full, 0);
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.mix.total_epochs = 2;
    cfg.batch_size = 8;
    cfg.identities_per_batch = 4;
    cfg.max_steps_per_epoch = Some(2);
    let out = fit(
        &train,
        &cfg,
        FitOptions {
            val: Some(&val),
            out_dir: Some(run.path()),
            resume: None,
            stop_after: None,
        },
    )
    .unwrap();
    assert_eq!(out.history.len(), 2);
    assert!(out.history.iter().all(|e| e.eval.is_some() && e.step_losses.len() == 2));
    let (config, last, best, history) = run_paths(run.path());
    for f in [&config, &last, &best, &history] {
        assert!(f.exists(), "{} missing", f.display());
    }
    let model = Checkpoint::load(&last).unwrap().model().unwrap();
    assert_eq!(model.params, out.trainer.model.params);
}
