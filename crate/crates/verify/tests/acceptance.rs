//! Acceptance criteria. Each check prints a single `criterion N: PASS|FAIL ...`
//! line before asserting; all checks run even when one fails, and the
//! process exits nonzero if any did.
//!
//! Pass substrings as arguments to run a subset, e.g. `cargo test --test acceptance -- 07`.

use std::panic;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use gea_core::autodiff::Tape;
use gea_core::encoders::{patchify, Image};
use gea_core::feature_store::{
    decode_bundle, encode_bundle, load_feature_bundle, write_feature_bundle, FeatureBundle,
    FeatureRef, IdentityLabel, Modality, Split,
};
use gea_core::fixture::{build_fixture, FixtureConfig};
use gea_core::flow_sampler::{euler_step, LatentState};
use gea_core::gif::{attention_heatmap, cross_attention, GifConfig, GifParams};
use gea_core::layers::MultiHeadAttention;
use gea_core::params::{ParamGroup, ParamSet};
use gea_core::retrieval::{evaluate, mean_average_precision, rank_k, score_manifest};
use gea_core::tal::{softmax_weights, tal, tal_with_grad, SimilarityMatrix, TalConfig};
use gea_core::tensor::Mat;
use gea_core::tgte::mix_tokens;
use gea_core::trainer::{fit, Ablation, Checkpoint, FitOptions, Trainer, TrainConfig};
use gea_core::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, pass: bool, detail: impl AsRef<str>) {
    println!(
        "criterion {n}: {} {}",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
}

fn ids(v: &[u32]) -> Vec<IdentityLabel> {
    v.iter().map(|&i| IdentityLabel(i)).collect()
}

/// Literal transcription of the alignment loss: hinge on
/// `m - S+ + tau * log sum exp(S / tau)` per row and per column, with S+
/// the softmax-weighted mean over the positives, averaged over K.
fn tal_oracle(s: &[Vec<f64>], id: &[u32], m: f64, tau: f64) -> f64 {
    let k = s.len();
    let term = |vals: &[f64], pos: &[bool]| -> f64 {
        let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + tau * vals.iter().map(|v| ((v - mx) / tau).exp()).sum::<f64>().ln();
        let pmx = vals
            .iter()
            .zip(pos)
            .filter(|(_, &p)| p)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut num = 0.0;
        let mut den = 0.0;
        for (v, &p) in vals.iter().zip(pos) {
            if p {
                let w = ((v - pmx) / tau).exp();
                num += w * v;
                den += w;
            }
        }
        (m - num / den + lse).max(0.0)
    };
    let mut total = 0.0;
    for i in 0..k {
        let row: Vec<f64> = s[i].clone();
        let pos: Vec<bool> = (0..k).map(|j| id[i] == id[j]).collect();
        total += term(&row, &pos);
        let col: Vec<f64> = (0..k).map(|j| s[j][i]).collect();
        total += term(&col, &pos);
    }
    total / k as f64
}

fn sim(rows: &[Vec<f64>], id: &[u32]) -> SimilarityMatrix {
    SimilarityMatrix::new(Mat::from_rows(rows), ids(id), ids(id)).unwrap()
}

fn criterion_01_tal_single_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = TalConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let s = rng.random_range(-1.0..=1.0);
        let l = tal(&sim(&[vec![s]], &[0]), &cfg).unwrap();
        worst = worst.max((l - 0.2).abs());
    }
    let pass = worst <= 1e-12;
    verdict(1, pass, format!("K=1 loss equals 2m, max deviation {worst:.2e}"));
    assert!(pass);
}

fn criterion_02_tal_gradient() {
    let t0 = Instant::now();
    let cfg = TalConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_rich: f64 = 0.0;
    let mut oracle_gap: f64 = 0.0;
    for inst in 0..100 {
        // Blocks of 1 to 4 samples per identity.
        let mut id = Vec::new();
        let mut next = 0u32;
        while id.len() < 8 {
            let b = rng.random_range(1..=4).min(8 - id.len());
            id.extend(std::iter::repeat_n(next, b));
            next += 1;
        }
        // Half the instances put positives on top, half are random.
        let s: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                (0..8)
                    .map(|j| {
                        let base = rng.random_range(-0.9..0.9);
                        if inst % 2 == 0 && id[i] == id[j] {
                            (base * 0.1 + 0.8_f64).min(0.99)
                        } else {
                            base
                        }
                    })
                    .collect()
            })
            .collect();
        let (l, g) = tal_with_grad(&sim(&s, &id), &cfg).unwrap();
        oracle_gap = oracle_gap.max((l - tal_oracle(&s, &id, 0.1, 0.015)).abs());
        let fd_at = |i: usize, j: usize, h: f64| {
            let mut p = s.clone();
            p[i][j] += h;
            let mut q = s.clone();
            q[i][j] -= h;
            (tal_oracle(&p, &id, 0.1, 0.015) - tal_oracle(&q, &id, 0.1, 0.015)) / (2.0 * h)
        };
        for i in 0..8 {
            for j in 0..8 {
                let a = g.get(i, j);
                let fd = fd_at(i, j, h);
                // Entries below 1e-4 sit inside the h^2 truncation band of
                // a tau = 0.015 softmax and are compared against the floor.
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4));
                let rich = (4.0 * fd_at(i, j, h / 2.0) - fd) / 3.0;
                worst_rich = worst_rich.max((a - rich).abs() / a.abs().max(rich.abs()).max(1e-6));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && oracle_gap < 1e-12 && secs < 60.0;
    verdict(
        2,
        pass,
        format!(
            "max rel err {worst:.2e} (h=1e-5), Richardson rel err {worst_rich:.1e}, loss vs oracle {oracle_gap:.1e}, {secs:.2}s"
        ),
    );
    assert!(pass);
}

fn criterion_03_softmax_rows() {
    let tau = 0.015;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut finite = true;
    for r in 0..1000 {
        let n = rng.random_range(1..=16);
        let row: Vec<f64> = (0..n)
            .map(|_| match r % 3 {
                0 => rng.random_range(-1.0..1.0),
                // logits s/tau reach ±50/tau
                1 => if rng.random_bool(0.5) { 50.0 } else { -50.0 },
                _ => rng.random_range(-50.0..50.0),
            })
            .collect();
        let mask = vec![true; n];
        let w = softmax_weights(&row, &mask, tau).unwrap();
        finite &= w.iter().all(|x| x.is_finite() && *x >= 0.0);
        worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    let pass = finite && worst <= 1e-12;
    verdict(3, pass, format!("1000 rows, max |sum-1| {worst:.2e}, finite {finite}"));
    assert!(pass);
}

fn criterion_04_mixing_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bit_exact = true;
    for _ in 0..100 {
        let t: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m0 = mix_tokens(&t, &g, 0.0).unwrap();
        let m1 = mix_tokens(&t, &g, 1.0).unwrap();
        bit_exact &= m0.iter().zip(&t).all(|(a, b)| a.to_bits() == b.to_bits());
        bit_exact &= m1.iter().zip(&g).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    // Full pipeline at omega = 0 against the same data with no generated
    // features at all (the baseline path).
    let f = build_fixture(&FixtureConfig {
        num_identities: 8,
        dim: 16,
        ..FixtureConfig::default()
    })
    .unwrap();
    let full = f.manifest(Split::Test, Path::new("."));
    let mut base = full.clone();
    for r in &mut base.records {
        r.generated = None;
        r.generated_ref = None;
    }
    let trainer = Trainer::for_manifest(
        TrainConfig {
            model: gea_core::trainer::ModelSettings {
                fusion_layers: 1,
                ..Default::default()
            },
            ..Default::default()
        },
        &full,
    )
    .unwrap();
    let a = score_manifest(&full, &trainer.model, 0.0, false, Execution::Parallel).unwrap();
    let b = score_manifest(&base, &trainer.model, 0.0, false, Execution::Parallel).unwrap();
    let gap = a.scores.max_abs_diff(&b.scores);
    let pass = bit_exact && gap <= 1e-10;
    verdict(4, pass, format!("endpoints bit-exact {bit_exact}, omega=0 vs baseline max diff {gap:.1e}"));
    assert!(pass);
}

/// Single-head attention written out with plain loops.
fn attention_oracle(q: &Mat, k: &Mat, v: &Mat, w: [&Mat; 4]) -> (Mat, Mat) {
    let [wq, wk, wv, wo] = w;
    let mul = |a: &Mat, b: &Mat| {
        let mut out = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for t in 0..a.cols() {
                    acc += a.get(i, t) * b.get(t, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    };
    let (qp, kp, vp) = (mul(q, wq), mul(k, wk), mul(v, wv));
    let d = qp.cols() as f64;
    let mut a = Mat::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let logits: Vec<f64> = (0..k.rows())
            .map(|j| (0..qp.cols()).map(|c| qp.get(i, c) * kp.get(j, c)).sum::<f64>() / d.sqrt())
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        for j in 0..k.rows() {
            a.set(i, j, e[j] / s);
        }
    }
    (mul(&mul(&a, &vp), wo), a)
}

fn criterion_05_cross_attention_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 8;
    let mut worst: f64 = 0.0;
    let mut row_sum: f64 = 0.0;
    for _ in 0..100 {
        let mut ps = ParamSet::new();
        let attn = MultiHeadAttention::new(&mut ps, "x", ParamGroup::Fusion, d, 1, false, &mut rng);
        let lq = rng.random_range(1..6);
        let lk = rng.random_range(1..6);
        let q = Mat::randn(lq, d, 1.0, &mut rng);
        let k = Mat::randn(lk, d, 1.0, &mut rng);
        let v = Mat::randn(lk, d, 1.0, &mut rng);
        let got = cross_attention(&ps, &attn, &q, &k, &v).unwrap();
        let w = [ps.get(attn.w_q), ps.get(attn.w_k), ps.get(attn.w_v), ps.get(attn.w_o)];
        let (want, _) = attention_oracle(&q, &k, &v, w);
        worst = worst.max(got.max_abs_diff(&want));
        let (_, a_kk) = attention_oracle(&q, &k, &k, w);
        let heat = attention_heatmap(&ps, &attn, &q, &k).unwrap();
        worst = worst.max(heat.max_abs_diff(&a_kk));
        for i in 0..heat.rows() {
            row_sum = row_sum.max((heat.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    // One key, identity projections: every output row is that key's value.
    let mut ps = ParamSet::new();
    let attn = MultiHeadAttention::new(&mut ps, "x", ParamGroup::Fusion, d, 1, false, &mut rng);
    for id in [attn.w_q, attn.w_k, attn.w_v, attn.w_o] {
        *ps.get_mut(id) = Mat::identity(d);
    }
    let q = Mat::randn(4, d, 1.0, &mut rng);
    let v = Mat::randn(1, d, 1.0, &mut rng);
    let out = cross_attention(&ps, &attn, &q, &v, &v).unwrap();
    let single = (0..4).all(|i| out.row(i) == v.row(0));
    let pass = worst <= 1e-10 && row_sum <= 1e-12 && single;
    verdict(
        5,
        pass,
        format!("max diff {worst:.1e}, row-sum err {row_sum:.1e}, single key exact {single}"),
    );
    assert!(pass);
}

fn criterion_06_gif_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 8;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for _ in 0..20 {
        let mut ps = ParamSet::new();
        let gif = GifParams::new(
            &mut ps,
            GifConfig {
                dim: d,
                heads: 1,
                layers: 1,
                mlp_ratio: 2,
            },
            &mut rng,
        )
        .unwrap();
        // Move every parameter off its initial value so zero-initialised
        // projections do not hide gradients elsewhere.
        let ids: Vec<_> = ps.ids().collect();
        for &id in &ids {
            let m = ps.get_mut(id);
            for x in m.data_mut() {
                *x += rng.random_range(-0.5..0.5);
            }
        }
        let img = Mat::randn(3, d, 1.0, &mut rng);
        let txt = Mat::randn(4, d, 1.0, &mut rng);
        let gen = Mat::randn(2, d, 1.0, &mut rng);
        let cv = Mat::randn(1, d, 1.0, &mut rng);
        let ct = Mat::randn(1, d, 1.0, &mut rng);
        let objective = |ps: &ParamSet| -> f64 {
            let mut t = Tape::new(ps);
            let (i, x, g) = (t.constant(img.clone()), t.constant(txt.clone()), t.constant(gen.clone()));
            let vf = gif.image_branch.fuse(&mut t, i, g, 0);
            let tf = gif.text_branch.fuse(&mut t, x, g, 3);
            let dotp = |a: &Mat, b: &Mat| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
            dotp(t.value(vf), &cv) + dotp(t.value(tf), &ct)
        };
        let grads = {
            let mut t = Tape::new(&ps);
            let (i, x, g) = (t.constant(img.clone()), t.constant(txt.clone()), t.constant(gen.clone()));
            let vf = gif.image_branch.fuse(&mut t, i, g, 0);
            let tf = gif.text_branch.fuse(&mut t, x, g, 3);
            t.backward(&[(vf, cv.clone()), (tf, ct.clone())])
        };
        for &id in &ids {
            let n = ps.get(id).len();
            for e in 0..n {
                let orig = ps.get(id).data()[e];
                ps.get_mut(id).data_mut()[e] = orig + h;
                let up = objective(&ps);
                ps.get_mut(id).data_mut()[e] = orig - h;
                let down = objective(&ps);
                ps.get_mut(id).data_mut()[e] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = grads.get(id).map_or(0.0, |g| g.data()[e]);
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
                checked += 1;
            }
        }
    }
    let pass = worst < 1e-3;
    verdict(6, pass, format!("{checked} parameter entries, max rel err {worst:.2e}"));
    assert!(pass);
}

fn criterion_07_euler_convergence() {
    // The update z <- z - dt v with v(z, t) = z discretises dz/dt = z run
    // backwards from t = 1, whose exact value at t = 0 is z(1) / e.
    let z1 = vec![1.0, -0.5, 2.0];
    let field = |z: &[f64], _t: f64, _c: &[f64]| z.to_vec();
    let integrate = |f: &dyn gea_core::flow_sampler::VelocityField, steps: usize| {
        let mut s = LatentState::new(z1.clone(), 1.0).unwrap();
        for _ in 0..steps {
            s = euler_step(&s, f, &[], 1.0 / steps as f64).unwrap();
        }
        s.z
    };
    let exact: Vec<f64> = z1.iter().map(|z| z * (-1.0f64).exp()).collect();
    let errs: Vec<f64> = [28, 56, 112]
        .iter()
        .map(|&n| {
            integrate(&field, n)
                .iter()
                .zip(&exact)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let ratios = [errs[0] / errs[1], errs[1] / errs[2]];
    let halves = ratios.iter().all(|r| (r - 2.0).abs() <= 0.4);
    let c = vec![0.3, -1.25, 0.7];
    let cf = |_z: &[f64], _t: f64, _c: &[f64]| c.clone();
    let constant_err = [1usize, 7, 28]
        .iter()
        .map(|&n| {
            integrate(&cf, n)
                .iter()
                .zip(z1.iter().zip(&c))
                .map(|(a, (z, c))| (a - (z - c)).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let pass = halves && constant_err <= 1e-12;
    verdict(
        7,
        pass,
        format!(
            "limit z(1)·e^-1, errors {:.2e}/{:.2e}/{:.2e}, ratios {:.3}/{:.3}, constant field err {constant_err:.1e}",
            errs[0], errs[1], errs[2], ratios[0], ratios[1]
        ),
    );
    assert!(pass);
}

/// Rank-k straight from the definition: the query succeeds when some
/// gallery item with a strictly higher score, or an equal score and a
/// lower index, is relevant among the first k.
fn brute_rank_k(s: &Mat, rel: &[Vec<bool>], k: usize) -> f64 {
    let mut hits = 0;
    for q in 0..s.rows() {
        let mut ok = false;
        for g in 0..s.cols() {
            if !rel[q][g] {
                continue;
            }
            let ahead = (0..s.cols())
                .filter(|&o| s.get(q, o) > s.get(q, g) || (s.get(q, o) == s.get(q, g) && o < g))
                .count();
            ok |= ahead < k;
        }
        hits += ok as usize;
    }
    100.0 * hits as f64 / s.rows() as f64
}

fn brute_map(s: &Mat, rel: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    for q in 0..s.rows() {
        let pos = |g: usize| {
            1 + (0..s.cols())
                .filter(|&o| s.get(q, o) > s.get(q, g) || (s.get(q, o) == s.get(q, g) && o < g))
                .count()
        };
        let mut ranks: Vec<usize> = (0..s.cols()).filter(|&g| rel[q][g]).map(pos).collect();
        ranks.sort();
        let ap: f64 = ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| (i + 1) as f64 / r as f64)
            .sum::<f64>()
            / ranks.len() as f64;
        total += ap;
    }
    total / s.rows() as f64
}

fn criterion_08_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut exact = true;
    for _ in 0..50 {
        // Coarse scores produce ties.
        let s = Mat::from_vec(8, 8, (0..64).map(|_| rng.random_range(0..5) as f64 / 4.0).collect());
        let rel: Vec<Vec<bool>> = (0..8)
            .map(|q| {
                let mut r: Vec<bool> = (0..8).map(|_| rng.random_bool(0.3)).collect();
                r[q] = true;
                r
            })
            .collect();
        let ks = [1, 5, 8];
        let got = rank_k(&s, &rel, &ks).unwrap();
        for (k, g) in ks.iter().zip(&got) {
            exact &= *g == brute_rank_k(&s, &rel, *k);
        }
        exact &= mean_average_precision(&s, &rel).unwrap() == brute_map(&s, &rel);
    }
    let perfect = Mat::identity(4);
    let rel_p: Vec<Vec<bool>> = (0..4).map(|q| (0..4).map(|g| q == g).collect()).collect();
    let perfect_ok = rank_k(&perfect, &rel_p, &[1]).unwrap()[0] == 100.0
        && mean_average_precision(&perfect, &rel_p).unwrap() == 1.0;
    let second = Mat::from_rows(&[vec![0.9, 0.1]]);
    let half_ok = mean_average_precision(&second, &[vec![false, true]]).unwrap() == 0.5;
    let pass = exact && perfect_ok && half_ok;
    verdict(
        8,
        pass,
        format!("50 random 8x8 exact {exact}, perfect {perfect_ok}, rank-2 mAP 0.5 {half_ok}"),
    );
    assert!(pass);
}

fn criterion_09_training_trend() {
    let t0 = Instant::now();
    let mut lines = Vec::new();
    let mut untrained_ok = true;
    let mut r1_ok = true;
    let mut order_ok = true;
    for seed in 0..3u64 {
        let f = build_fixture(&FixtureConfig::desk(seed)).unwrap();
        let train = f.manifest(Split::Train, Path::new("."));
        let test = f.manifest(Split::Test, Path::new("."));
        let mut maps = Vec::new();
        for ab in [Ablation::Baseline, Ablation::TgteOnly, Ablation::Full] {
            let cfg = TrainConfig::desk(ab, seed);
            if ab == Ablation::Baseline {
                let untrained = Trainer::for_manifest(cfg.clone(), &train).unwrap();
                let r0 = evaluate(&test, &untrained.model, 0.0, false, cfg.execution).unwrap();
                untrained_ok &= r0.rank1 < 20.0;
                lines.push(format!("seed {seed} untrained R-1 {:.1}", r0.rank1));
            }
            let out = fit(&train, &cfg, FitOptions::default()).unwrap();
            let r = evaluate(&test, &out.trainer.model, cfg.eval_omega(), false, cfg.execution).unwrap();
            if ab == Ablation::Full {
                r1_ok &= r.rank1 > 90.0;
            }
            lines.push(format!("seed {seed} {} R-1 {:.1} mAP {:.4}", ab.label(), r.rank1, r.map));
            maps.push(r.map);
        }
        order_ok &= maps[2] >= maps[1] && maps[1] >= maps[0];
    }
    let secs = t0.elapsed().as_secs_f64();
    for l in &lines {
        println!("  {l}");
    }
    let pass = untrained_ok && r1_ok && order_ok && secs < 600.0;
    verdict(
        9,
        pass,
        format!(
            "untrained<20 {untrained_ok}, full R-1>90 {r1_ok}, mAP full>=tgte_only>=baseline on every seed {order_ok}, {secs:.0}s"
        ),
    );
    assert!(pass);
}

fn criterion_10_determinism_and_resume() {
    let f = build_fixture(&FixtureConfig {
        num_identities: 8,
        train_identities: Some(16),
        dim: 16,
        ..FixtureConfig::desk(10)
    })
    .unwrap();
    let train = f.manifest(Split::Train, Path::new("."));
    let cfg = TrainConfig {
        batch_size: 16,
        identities_per_batch: 4,
        execution: Execution::Sequential,
        model: gea_core::trainer::ModelSettings {
            fusion_heads: 2,
            ..TrainConfig::desk(Ablation::Full, 10).model
        },
        ..TrainConfig::desk(Ablation::Full, 10)
    };
    let five_steps = || {
        let mut t = Trainer::for_manifest(cfg.clone(), &train).unwrap();
        let data = t.prepare(&train).unwrap();
        let mut losses = Vec::new();
        while losses.len() < 5 {
            let rec = t.run_epoch(&data, None).unwrap();
            losses.extend(rec.step_losses);
        }
        losses.truncate(5);
        losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>()
    };
    let same_losses = five_steps() == five_steps();

    let straight = fit(&train, &cfg, FitOptions { stop_after: Some(4), ..Default::default() }).unwrap();
    let half = fit(&train, &cfg, FitOptions { stop_after: Some(2), ..Default::default() }).unwrap();
    let bytes = half.trainer.checkpoint().to_bytes();
    let resumed = fit(
        &train,
        &cfg,
        FitOptions {
            resume: Some(Checkpoint::from_bytes(&bytes).unwrap()),
            stop_after: Some(4),
            ..Default::default()
        },
    )
    .unwrap();
    let a = straight.trainer.checkpoint();
    let b = resumed.trainer.checkpoint();
    let same_params = a.params == b.params && a.adam_m == b.adam_m && a.adam_v == b.adam_v;
    let same_history = a.header.history == b.header.history;
    let pass = same_losses && same_params && same_history;
    verdict(
        10,
        pass,
        format!("5-step losses identical {same_losses}, resume bit-equal params {same_params}, history {same_history}"),
    );
    assert!(pass);
}

fn criterion_11_patch_count() {
    let img = Image::new(384, 128, 3, vec![0.0; 384 * 128 * 3]).unwrap();
    let n = patchify(&img, 16).unwrap().rows();
    verdict(11, n == 192, format!("384x128 with 16x16 patches gives {n}"));
    assert_eq!(n, 192);
}

fn criterion_12_feature_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut ok = 0;
    for i in 0..1000 {
        let d = rng.random_range(1..=64);
        let l = rng.random_range(1..=8);
        let modality = [Modality::Image, Modality::Text, Modality::Generated][i % 3];
        let global: Vec<f32> = (0..d).map(|_| f32::from_bits(finite_bits(&mut rng))).collect();
        let tokens: Vec<f32> = (0..d * l).map(|_| f32::from_bits(finite_bits(&mut rng))).collect();
        let b = FeatureBundle::new(modality, global, tokens).unwrap();
        let path = dir.path().join(format!("{i}.geaf"));
        write_feature_bundle(&b, &path).unwrap();
        let back = load_feature_bundle(&FeatureRef::new(path.to_str().unwrap()), dir.path(), d, modality).unwrap();
        let again = decode_bundle(&encode_bundle(&back), d, modality).unwrap();
        ok += (back.bit_eq(&b) && again.bit_eq(&b)) as usize;
    }
    verdict(12, ok == 1000, format!("{ok}/1000 bundles bit-exact"));
    assert_eq!(ok, 1000);
}

/// Any finite f32 bit pattern, including subnormals and negative zero.
fn finite_bits(rng: &mut ChaCha8Rng) -> u32 {
    loop {
        let b: u32 = rng.random();
        if f32::from_bits(b).is_finite() {
            return b;
        }
    }
}

const CHECKS: [(&str, fn()); 12] = [
    ("criterion_01_tal_single_pair", criterion_01_tal_single_pair),
    ("criterion_02_tal_gradient", criterion_02_tal_gradient),
    ("criterion_03_softmax_rows", criterion_03_softmax_rows),
    ("criterion_04_mixing_endpoints", criterion_04_mixing_endpoints),
    ("criterion_05_cross_attention_oracle", criterion_05_cross_attention_oracle),
    ("criterion_06_gif_gradient", criterion_06_gif_gradient),
    ("criterion_07_euler_convergence", criterion_07_euler_convergence),
    ("criterion_08_metric_oracle", criterion_08_metric_oracle),
    ("criterion_09_training_trend", criterion_09_training_trend),
    ("criterion_10_determinism_and_resume", criterion_10_determinism_and_resume),
    ("criterion_11_patch_count", criterion_11_patch_count),
    ("criterion_12_feature_round_trip", criterion_12_feature_round_trip),
];

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (name, _) in CHECKS {
            println!("{name}: test");
        }
        return ExitCode::SUCCESS;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    let mut ran = 0;
    for (name, check) in CHECKS {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        if panic::catch_unwind(check).is_err() {
            failed.push(name);
        }
    }
    println!("\nacceptance: {} of {ran} passed", ran - failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
