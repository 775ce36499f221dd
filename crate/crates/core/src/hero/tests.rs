use std::collections::HashMap;

use super::*;
use crate::microworld::{OracleConfig, WorldConfig};
use crate::prefdata::{annotate, build_pairs, generate_pool, AnnotatedVideo, PoolConfig, PrefConfig};

struct Fixture {
    videos: Vec<AnnotatedVideo>,
    pairs: Vec<PreferencePair>,
    scaler: FeatureScaler,
}

fn fixture() -> Fixture {
    let world = WorldConfig::default();
    let pool = generate_pool(
        &PoolConfig {
            n_videos: 120,
            ..PoolConfig::default()
        },
        &world,
        5,
        0,
    )
    .unwrap();
    let videos = annotate(pool, &world, &OracleConfig::default()).unwrap();
    let pairs = build_pairs(&videos, &PrefConfig::default()).unwrap();
    let feats: Vec<_> = videos.iter().map(|v| raw_features(&v.traj, world.gripper_radius)).collect();
    Fixture {
        videos,
        pairs,
        scaler: FeatureScaler::fit(&feats).unwrap(),
    }
}

fn small_model(fx: &Fixture, cfg: &HeroConfig, seed: u64) -> (Hero, FeatureBank) {
    let mut arch = cfg.arch(32, WorldConfig::default().gripper_radius, fx.scaler.clone());
    arch.trunk = vec![16; 8];
    arch.head_hidden = 8;
    let model = Hero::new(arch, seed).unwrap();
    let bank = FeatureBank::build(&model, &fx.videos).unwrap();
    (model, bank)
}

fn pair(a: u64, b: u64, k: Dim, delta: [f64; 4], isolated: bool) -> PreferencePair {
    PreferencePair {
        id_a: a,
        id_b: b,
        k,
        delta,
        isolated,
    }
}

#[test]
fn bt_loss_closed_forms() {
    assert!((bt_loss(0.3, 0.3, true) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((bt_loss(1.0, 0.0, true) - 0.313262).abs() < 1e-6);
    assert!((bt_loss(0.0, 1.0, false) - 0.313262).abs() < 1e-6);
    let mut prev = f64::INFINITY;
    for m in [0.0, 1.0, 5.0, 20.0, 50.0] {
        let l = bt_loss(m, 0.0, true);
        assert!(l > 0.0 && l < prev);
        prev = l;
    }
    assert!(bt_loss(800.0, 0.0, true) < 1e-300);
    for (a, b) in [(0.0, 0.0), (1.0, -2.0), (3.5, 3.4)] {
        let s = bt_loss(a, b, true) + bt_loss(b, a, true);
        assert!(s >= 2.0 * std::f64::consts::LN_2 - 1e-15);
        assert_eq!(s == 2.0 * std::f64::consts::LN_2, a == b);
    }
}

#[test]
fn masks_use_a_strict_margin_and_are_monotone() {
    let cfg = HeroConfig::default();
    let at = pair(0, 1, Dim::Phys, [2.0, 0.0, 0.0, 0.0], true);
    assert!(!cfg.mask(&at, Dim::Phys));
    let above = pair(0, 1, Dim::Phys, [2.0 + 1e-12, 0.0, 0.0, 0.0], true);
    assert!(cfg.mask(&above, Dim::Phys));
    assert_eq!(cfg.pair_weight(&above, Dim::Phys), (2.0 + 1e-12) / 5.0 * 2.0);

    let fx = fixture();
    let mut prev = usize::MAX;
    for tau in [0.0, 0.5, 1.0, 2.0, 3.0, 5.0] {
        let c = HeroConfig {
            tau_margin: tau,
            ..cfg
        };
        let open: usize = fx
            .pairs
            .iter()
            .map(|p| Dim::ALL.iter().filter(|k| c.mask(p, **k)).count())
            .sum();
        assert!(open <= prev);
        prev = open;
    }
}

#[test]
fn dimensional_loss_matches_per_pair_reference() {
    let fx = fixture();
    let cfg = HeroConfig {
        tau_margin: 0.5,
        ..HeroConfig::default()
    };
    let (model, bank) = small_model(&fx, &cfg, 1);
    let batch: Vec<PreferencePair> = fx.pairs.iter().take(40).cloned().collect();
    let got = dimensional_loss(&model, &bank, &batch, &cfg).unwrap();
    let by_id: HashMap<u64, &AnnotatedVideo> = fx.videos.iter().map(|v| (v.id, v)).collect();
    let mut want = 0.0;
    for p in &batch {
        let ra = model.score_4d(&by_id[&p.id_a].traj).unwrap();
        let rb = model.score_4d(&by_id[&p.id_b].traj).unwrap();
        for k in Dim::ALL {
            let d = p.delta[k.index()];
            if d.abs() > cfg.tau_margin {
                let w = d.abs() / 5.0 * if p.isolated { cfg.w_boost } else { 1.0 };
                want += w * bt_loss(ra.get(k), rb.get(k), d > 0.0) / batch.len() as f64;
            }
        }
    }
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn composite_loss_interpolates_its_parts() {
    let fx = fixture();
    let base = HeroConfig::default();
    let (model, bank) = small_model(&fx, &base, 2);
    let batch: Vec<PreferencePair> = fx.pairs.iter().take(30).cloned().collect();
    let l_d = dimensional_loss(&model, &bank, &batch, &base).unwrap();
    let l_o = overall_loss(&model, &bank, &batch, &base).unwrap();
    let at = |beta: f64| hero_loss(&model, &bank, &batch, &HeroConfig { beta, ..base }).unwrap().total;
    assert!((at(1.0) - l_d).abs() < 1e-12);
    assert!((at(0.0) - l_o).abs() < 1e-12);
    assert!((at(0.5) - 0.5 * (l_d + l_o)).abs() < 1e-9);

    // overall loss is the mean of the per-pair losses
    let by_id: HashMap<u64, &AnnotatedVideo> = fx.videos.iter().map(|v| (v.id, v)).collect();
    let mut acc = Vec::new();
    for p in &batch {
        let sum: f64 = p.delta.iter().sum();
        if sum != 0.0 {
            let ra = model.score_4d(&by_id[&p.id_a].traj).unwrap().total;
            let rb = model.score_4d(&by_id[&p.id_b].traj).unwrap().total;
            acc.push(bt_loss(ra, rb, sum > 0.0));
        }
    }
    assert!((l_o - acc.iter().sum::<f64>() / acc.len() as f64).abs() < 1e-9);
}

#[test]
fn equal_sums_are_skipped_by_the_overall_loss() {
    let fx = fixture();
    let cfg = HeroConfig::default();
    let (model, bank) = small_model(&fx, &cfg, 3);
    let ids: Vec<u64> = fx.videos.iter().map(|v| v.id).collect();
    let tied = vec![pair(ids[0], ids[1], Dim::Phys, [3.0, -3.0, 0.0, 0.0], false)];
    assert_eq!(overall_loss(&model, &bank, &tied, &cfg).unwrap(), 0.0);
    let parts = hero_loss(&model, &bank, &tied, &cfg).unwrap();
    assert_eq!(parts.overall_pairs, 0);
}

#[test]
fn only_the_target_head_receives_gradient() {
    let fx = fixture();
    let cfg = HeroConfig {
        beta: 1.0,
        ..HeroConfig::default()
    };
    let (mut model, bank) = small_model(&fx, &cfg, 4);
    let ids: Vec<u64> = fx.videos.iter().map(|v| v.id).collect();
    let batch = vec![pair(ids[0], ids[1], Dim::Phys, [5.0, 0.0, 0.0, 0.0], true)];
    hero_backward(&mut model, &bank, &batch, &cfg).unwrap();
    assert!(model.store.grad_norm("hero.head.phys") > 0.0);
    for k in [Dim::Embod, Dim::Task, Dim::Vis] {
        assert_eq!(model.store.grad_norm(&format!("hero.head.{}", k.name())), 0.0);
    }

    // a batch of task pairs only
    model.store.zero_grad();
    let task: Vec<PreferencePair> = fx
        .pairs
        .iter()
        .filter(|p| p.k == Dim::Task)
        .map(|p| PreferencePair {
            delta: [0.0, 0.0, p.delta[2], 0.0],
            ..p.clone()
        })
        .take(10)
        .collect();
    assert!(!task.is_empty());
    hero_backward(&mut model, &bank, &task, &cfg).unwrap();
    assert!(model.store.grad_norm("hero.head.task") > 0.0);
    for k in [Dim::Phys, Dim::Embod, Dim::Vis] {
        assert_eq!(model.store.grad_norm(&format!("hero.head.{}", k.name())), 0.0);
    }
}

#[test]
fn closed_masks_give_zero_loss_and_no_gradient() {
    let fx = fixture();
    let cfg = HeroConfig {
        beta: 1.0,
        ..HeroConfig::default()
    };
    let (mut model, bank) = small_model(&fx, &cfg, 5);
    let ids: Vec<u64> = fx.videos.iter().map(|v| v.id).collect();
    let batch = vec![pair(ids[0], ids[1], Dim::Vis, [0.5, 0.5, 0.5, 1.0], true)];
    assert_eq!(hero_backward(&mut model, &bank, &batch, &cfg).unwrap().total, 0.0);
    assert_eq!(model.store.grad_norm(""), 0.0);
}

#[test]
fn degenerate_weights_and_zero_heads() {
    let fx = fixture();
    let cfg = HeroConfig {
        weights: [1.0, 0.0, 0.0, 0.0],
        ..HeroConfig::default()
    };
    let (mut model, _) = small_model(&fx, &cfg, 6);
    for v in fx.videos.iter().take(5) {
        let r = model.score_4d(&v.traj).unwrap();
        assert_eq!(r.total, r.heads[0]);
    }
    let biases = [0.1, -0.2, 0.3, 0.7];
    for (k, b) in Dim::ALL.iter().zip(biases) {
        let spec = model.head_spec(*k).clone();
        spec.zero_output_layer(&mut model.store).unwrap();
        model.store.get_mut(&spec.bias_name(spec.n_layers() - 1)).unwrap().fill(b);
    }
    let r = model.score_4d(&fx.videos[0].traj).unwrap();
    assert_eq!(r.heads, biases);
    assert_eq!(r.total, 0.1);
}

#[test]
fn single_dominated_pair_is_learned_monotonically() {
    let fx = fixture();
    let cfg = HeroConfig {
        beta: 0.0,
        ..HeroConfig::default()
    };
    let (mut model, bank) = small_model(&fx, &cfg, 7);
    let ids: Vec<u64> = fx.videos.iter().map(|v| v.id).collect();
    let batch = vec![pair(ids[2], ids[3], Dim::Task, [1.0, 2.0, 3.0, 0.5], false)];
    let opt = AdamW::with_lr(1e-3);
    let mut prev = f64::INFINITY;
    for _ in 0..50 {
        let l = hero_backward(&mut model, &bank, &batch, &cfg).unwrap().total;
        assert!(l < prev, "{l} after {prev}");
        prev = l;
        opt.step(&mut model.store).unwrap();
    }
}

#[test]
fn copied_oracle_scores_are_perfect_and_random_scores_are_chance() {
    let fx = fixture();
    let scores: HashMap<u64, [f64; 4]> = fx.videos.iter().map(|v| (v.id, v.score.as_array())).collect();
    let copy: HashMap<u64, Reward4> = scores
        .iter()
        .map(|(&id, s)| {
            (
                id,
                Reward4 {
                    heads: *s,
                    total: s.iter().sum::<f64>() / 4.0,
                },
            )
        })
        .collect();
    let rep = evaluate_rewards(&copy, &scores, &fx.pairs).unwrap();
    for k in Dim::ALL {
        if rep.head(k).n_pairs > 0 {
            assert_eq!(rep.head(k).accuracy, 1.0);
        }
    }
    assert_eq!(rep.dimension_accuracy, 1.0);
    assert_eq!(rep.overall.accuracy, 1.0);
    assert_eq!(rep.overall.auc, 1.0);
    assert!((rep.overall.spearman - 1.0).abs() < 1e-12);
    assert!((rep.overall.kendall - 1.0).abs() < 1e-12);

    // random rewards on many synthetic pairs
    let mut rng = crate::seed::rng(9, &[0]);
    let n = 2000u64;
    let rand_rewards: HashMap<u64, Reward4> = (0..n)
        .map(|id| {
            let heads = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
            (id, Reward4 { heads, total: rng.gen() })
        })
        .collect();
    let rand_scores: HashMap<u64, [f64; 4]> = (0..n).map(|id| (id, [rng.gen(), 1.0, 1.0, 1.0])).collect();
    let pairs: Vec<PreferencePair> = (0..n / 2)
        .map(|i| pair(2 * i, 2 * i + 1, Dim::Phys, [if i % 2 == 0 { 3.0 } else { -3.0 }, 0.0, 0.0, 0.0], true))
        .collect();
    let rep = evaluate_rewards(&rand_rewards, &rand_scores, &pairs).unwrap();
    let sd = (0.25 / pairs.len() as f64).sqrt();
    assert!((rep.head(Dim::Phys).accuracy - 0.5).abs() < 3.0 * sd);
    assert!(matches!(evaluate_rewards(&copy, &scores, &[]), Err(Error::Config(_))));
}

fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
    // distinct values: rank = 1 + number of smaller entries
    let rank = |v: &[f64]| -> Vec<f64> { v.iter().map(|a| 1.0 + v.iter().filter(|b| *b < a).count() as f64).collect() };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn metrics_agree_with_brute_force_on_a_fixture() {
    let mut rng = crate::seed::rng(12, &[0]);
    let n = 20u64;
    let rewards: HashMap<u64, Reward4> = (0..2 * n)
        .map(|id| {
            let t: f64 = rng.gen();
            (id, Reward4 { heads: [t, t, t, t], total: t })
        })
        .collect();
    let scores: HashMap<u64, [f64; 4]> = (0..2 * n)
        .map(|id| {
            let s = 1.0 + 5.0 * rng.gen::<f64>();
            (id, [s, 1.0, 1.0, 1.0])
        })
        .collect();
    let pairs: Vec<PreferencePair> = (0..n)
        .map(|i| {
            let (a, b) = (2 * i, 2 * i + 1);
            let d = scores[&a][0] - scores[&b][0];
            pair(a, b, Dim::Phys, [d, 0.0, 0.0, 0.0], true)
        })
        .collect();
    let rep = evaluate_rewards(&rewards, &scores, &pairs).unwrap();
    let correct = pairs
        .iter()
        .filter(|p| (rewards[&p.id_a].total > rewards[&p.id_b].total) == (p.delta[0] > 0.0))
        .count();
    assert_eq!(rep.overall.accuracy, correct as f64 / n as f64);
    assert_eq!(rep.head(Dim::Phys).accuracy, correct as f64 / n as f64);
    let ids: Vec<u64> = (0..2 * n).collect();
    let x: Vec<f64> = ids.iter().map(|i| rewards[i].total).collect();
    let y: Vec<f64> = ids.iter().map(|i| scores[i].iter().sum()).collect();
    assert!((rep.overall.spearman - brute_spearman(&x, &y)).abs() < 1e-12);
    let mut conc = 0i64;
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            conc += ((x[i] - x[j]) * (y[i] - y[j])).signum() as i64;
        }
    }
    let tau = conc as f64 / (x.len() * (x.len() - 1) / 2) as f64;
    assert!((rep.overall.kendall - tau).abs() < 1e-12);
    // AUC of the reward difference over both orientations of each pair
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for p in &pairs {
        let d = rewards[&p.id_a].total - rewards[&p.id_b].total;
        let (w, l) = if p.delta[0] > 0.0 { (d, -d) } else { (-d, d) };
        pos.push(w);
        neg.push(l);
    }
    let mut wins = 0.0;
    for a in &pos {
        for b in &neg {
            wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    assert!((rep.overall.auc - wins / (pos.len() * neg.len()) as f64).abs() < 1e-12);
}

#[test]
fn architecture_validation_and_checkpoint_round_trip() {
    let fx = fixture();
    let cfg = HeroConfig::default();
    let arch = cfg.arch(32, 0.05, fx.scaler.clone());
    assert!(arch.is_hierarchical());
    assert!(!arch.clone().final_layer_only().is_hierarchical());
    let mut bad = arch.clone();
    bad.taps = [4, 2, 6, 8];
    assert!(Hero::new(bad, 0).is_err());
    let mut bad = arch.clone();
    bad.weights = [0.5, 0.5, 0.5, -0.5];
    assert!(Hero::new(bad, 0).is_err());
    let mut bad = arch.clone();
    bad.segments = 5;
    assert!(Hero::new(bad, 0).is_err());

    let (model, _) = small_model(&fx, &cfg, 8);
    let bytes = model.checkpoint(3).unwrap().to_bytes().unwrap();
    let back = Hero::from_checkpoint(&crate::diffcore::Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let (a, b) = (model.score_4d(&fx.videos[0].traj).unwrap(), back.score_4d(&fx.videos[0].traj).unwrap());
    for k in 0..4 {
        assert!((a.heads[k] - b.heads[k]).abs() < 1e-4);
    }
    let short = crate::microworld::simulate(&fx.videos[0].traj.condition, 16, 0, &WorldConfig::default()).unwrap();
    assert!(matches!(model.score_4d(&short), Err(Error::Contract(_))));
}
