use gea_core::feature_store::ingest_manifest;
use gea_core::fixture::{make_fixture, FixtureConfig};
use gea_core::trainer::{Ablation, TrainConfig, Trainer};
use gea_core::Execution;

fn tiny_trainer(ablation: Ablation, exec: Execution) -> (Trainer, Vec<gea_core::model::PreparedSample>) {
    let dir = tempfile::tempdir().unwrap();
    let fx = FixtureConfig {
        num_identities: 4,
        train_identities: Some(4),
        texts_per_identity: 2,
        dim: 8,
        tokens_per_bundle: 3,
        ..FixtureConfig::desk(3)
    };
    let (_, paths) = make_fixture(&fx, dir.path()).unwrap();
    let train = ingest_manifest(&paths.train).unwrap();
    let mut cfg = TrainConfig::desk(ablation, 3);
    cfg.batch_size = 8;
    cfg.identities_per_batch = 4;
    cfg.model.fusion_heads = 2;
    cfg.model.fusion_layers = 1;
    cfg.model.mlp_ratio = 2;
    cfg.execution = exec;
    let mut t = Trainer::for_manifest(cfg, &train).unwrap();
    // Mid-schedule, so both the text and generated paths carry gradient.
    t.epoch = t.config.mix.total_epochs / 2;
    let prepared = t.prepare(&train).unwrap();
    (t, prepared)
}

fn total_loss(t: &Trainer, batch: &[&gea_core::model::PreparedSample]) -> f64 {
    t.loss_and_grads(batch).unwrap().0.total
}

#[test]
fn full_model_gradients_match_central_differences() {
    let (mut t, prepared) = tiny_trainer(Ablation::Full, Execution::Sequential);
    let omega = t.current_omega().unwrap();
    assert!(omega > 0.0 && omega < 1.0, "omega {omega}");
    let batch: Vec<_> = prepared.iter().collect();
    let (_, grads) = t.loss_and_grads(&batch).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let ids: Vec<_> = t.model.params.ids().collect();
    for id in ids {
        let n = t.model.params.get(id).len();
        // A handful of entries per tensor keeps the test quick.
        for k in (0..n).step_by((n / 3).max(1)) {
            let orig = t.model.params.get(id).data()[k];
            t.model.params.get_mut(id).data_mut()[k] = orig + h;
            let up = total_loss(&t, &batch);
            t.model.params.get_mut(id).data_mut()[k] = orig - h;
            let down = total_loss(&t, &batch);
            t.model.params.get_mut(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    assert!(checked > 50);
    assert!(worst < 1e-3, "worst relative error {worst:e}");
}

#[test]
fn fusion_params_get_no_gradient_without_fusion() {
    let (t, prepared) = tiny_trainer(Ablation::TgteOnly, Execution::Sequential);
    let batch: Vec<_> = prepared.iter().collect();
    let (_, grads) = t.loss_and_grads(&batch).unwrap();
    for (id, p) in t.model.params.iter() {
        if p.group == gea_core::params::ParamGroup::Fusion {
            let zero = grads.get(id).is_none_or(|g| g.data().iter().all(|&x| x == 0.0));
            assert!(zero, "{} received gradient", p.name);
        }
    }
}

#[test]
fn parallel_and_sequential_steps_agree_bitwise() {
    let (mut a, prepared) = tiny_trainer(Ablation::Full, Execution::Sequential);
    let (mut b, _) = tiny_trainer(Ablation::Full, Execution::Parallel);
    let batch: Vec<_> = prepared.iter().collect();
    for _ in 0..3 {
        let la = a.train_step(&batch).unwrap();
        let lb = b.train_step(&batch).unwrap();
        assert_eq!(la.total.to_bits(), lb.total.to_bits());
    }
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn fusion_tal_override_only_touches_the_fusion_term() {
    let (mut t, prepared) = tiny_trainer(Ablation::Full, Execution::Sequential);
    let batch: Vec<_> = prepared.iter().collect();
    let (shared, _) = t.loss_and_grads(&batch).unwrap();
    let mut wide = t.config.tal.clone();
    wide.margin += 0.4;
    t.config.fusion_tal = Some(wide);
    let (split, _) = t.loss_and_grads(&batch).unwrap();
    assert_eq!(shared.align.to_bits(), split.align.to_bits());
    // The hinge never switches off, so a wider margin adds exactly 2 × 0.4.
    assert!((split.fusion.unwrap() - shared.fusion.unwrap() - 0.8).abs() < 1e-9);
}
