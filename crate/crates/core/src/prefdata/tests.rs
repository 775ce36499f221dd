use rand::Rng;

use super::*;
use crate::microworld::Provenance;

fn dummy_traj() -> Trajectory {
    let w = WorldConfig::default();
    let mut rng = seed::rng(0, &[1]);
    let cond = random_condition(&mut rng, 0, Some(TaskKind::Reach), &w);
    simulate(&cond, 4, 0, &w).unwrap()
}

fn video(id: u64, s: [f64; 4], traj: &Trajectory) -> AnnotatedVideo {
    AnnotatedVideo {
        id,
        traj: traj.clone(),
        score: ScoreVector::from_array(s).unwrap(),
    }
}

fn random_pool(n: usize, seed_: u64) -> Vec<AnnotatedVideo> {
    let t = dummy_traj();
    let mut rng = seed::rng(seed_, &[77]);
    (0..n)
        .map(|i| {
            // coarse grid so ties occur
            let s = [0; 4].map(|_: i32| 1.0 + (rng.gen_range(0..=20) as f64) * 0.25);
            video(i as u64, s, &t)
        })
        .collect()
}

/// Exhaustive reference: repeatedly scan all pairs and take the best eligible one.
fn reference_select(pool: &[AnnotatedVideo], k: Dim, tau: f64, eps: f64, max: usize, u_max: usize) -> Vec<PreferencePair> {
    let mut used = vec![0usize; pool.len()];
    let mut taken = std::collections::HashSet::new();
    let mut out = Vec::new();
    while out.len() < max {
        let mut best: Option<(f64, u64, u64, usize, usize)> = None;
        for i in 0..pool.len() {
            for j in 0..pool.len() {
                if i == j || pool[i].score.get(k) <= pool[j].score.get(k) {
                    continue;
                }
                let d = pool[i].score.get(k) - pool[j].score.get(k);
                if d <= tau || used[i] >= u_max || used[j] >= u_max || taken.contains(&(i, j)) {
                    continue;
                }
                let key = (d, pool[i].id.min(pool[j].id), pool[i].id.max(pool[j].id), i, j);
                let better = match best {
                    None => true,
                    Some(b) => key.0 > b.0 || (key.0 == b.0 && (key.1, key.2) < (b.1, b.2)),
                };
                if better {
                    best = Some(key);
                }
            }
        }
        let Some((_, _, _, i, j)) = best else { break };
        taken.insert((i, j));
        used[i] += 1;
        used[j] += 1;
        let a = pool[i].score.as_array();
        let b = pool[j].score.as_array();
        let delta = [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]];
        let isolated = (0..4).filter(|&l| l != k.index()).all(|l| delta[l].abs() < eps);
        out.push(PreferencePair {
            id_a: pool[i].id,
            id_b: pool[j].id,
            k,
            delta,
            isolated,
        });
    }
    out
}

#[test]
fn annotate_preserves_order_and_purity() {
    let w = WorldConfig::default();
    let o = OracleConfig::default();
    let t = dummy_traj();
    let out = annotate(vec![t.clone(), t.clone()], &w, &o).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].score, out[1].score);
    assert_eq!((out[0].id, out[1].id), (0, 1));
    assert!(matches!(annotate(vec![], &w, &o), Err(Error::Input(_))));
}

#[test]
fn clean_rollout_annotates_high() {
    let w = WorldConfig::default();
    let mut rng = seed::rng(5, &[1]);
    let cond = random_condition(&mut rng, 0, None, &w);
    let t = simulate(&cond, 32, 5, &w).unwrap();
    let a = annotate(vec![t], &w, &OracleConfig::default()).unwrap();
    assert!(a[0].score.as_array().iter().all(|&s| s >= 5.0));
}

#[test]
fn two_video_pool_gives_one_isolated_pair() {
    let t = dummy_traj();
    let pool = vec![video(0, [6.0, 3.0, 3.0, 3.0], &t), video(1, [1.0, 3.0, 3.0, 3.0], &t)];
    let pairs = select_pairs(&pool, Dim::Phys, 2.0, 1.0, 10, 4).unwrap();
    assert_eq!(pairs.len(), 1);
    assert!(pairs[0].isolated);
    assert_eq!(pairs[0].delta[0], 5.0);
    assert_eq!((pairs[0].id_a, pairs[0].id_b), (0, 1));
}

#[test]
fn equal_scores_give_no_pairs() {
    let t = dummy_traj();
    let pool: Vec<_> = (0..5).map(|i| video(i, [4.0, 1.0 + i as f64, 2.0, 2.0], &t)).collect();
    assert!(select_pairs(&pool, Dim::Phys, 2.0, 1.0, 10, 4).unwrap().is_empty());
}

#[test]
fn selector_matches_exhaustive_reference() {
    for (n, seed_) in [(12, 1), (30, 2), (50, 3)] {
        let pool = random_pool(n, seed_);
        for k in Dim::ALL {
            let got = select_pairs(&pool, k, 2.0, 1.0, 40, 4).unwrap();
            assert_eq!(got, reference_select(&pool, k, 2.0, 1.0, 40, 4), "n={n} {k}");
        }
    }
}

#[test]
fn selector_matches_reference_on_large_pool() {
    let pool = random_pool(1000, 9);
    let got = select_pairs(&pool, Dim::Task, 2.0, 1.0, 60, 4).unwrap();
    assert_eq!(got, reference_select(&pool, Dim::Task, 2.0, 1.0, 60, 4));
}

#[test]
fn pair_invariants_hold() {
    let pool = random_pool(200, 4);
    for k in Dim::ALL {
        let pairs = select_pairs(&pool, k, 2.0, 1.0, 300, 4).unwrap();
        let by_id: BTreeMap<u64, &AnnotatedVideo> = pool.iter().map(|v| (v.id, v)).collect();
        let mut usage: BTreeMap<u64, usize> = BTreeMap::new();
        for w in pairs.windows(2) {
            assert!(w[0].delta[k.index()].abs() >= w[1].delta[k.index()].abs());
        }
        for p in &pairs {
            let d = delta(&by_id[&p.id_a].score, &by_id[&p.id_b].score);
            assert_eq!(d, p.delta);
            assert!(p.delta[k.index()].abs() > 2.0);
            let iso = Dim::ALL.iter().filter(|&&l| l != k).all(|l| d[l.index()].abs() < 1.0);
            assert_eq!(iso, p.isolated);
            *usage.entry(p.id_a).or_default() += 1;
            *usage.entry(p.id_b).or_default() += 1;
            let s = p.swapped();
            assert_eq!(s.delta.map(|x| -x), p.delta);
            assert_eq!(s.swapped(), *p);
        }
        assert!(usage.values().all(|&u| u <= 4));
    }
}

#[test]
fn selector_contract_errors() {
    let pool = random_pool(3, 1);
    assert!(select_pairs(&pool[..1], Dim::Phys, 2.0, 1.0, 5, 4).is_err());
    assert!(select_pairs(&pool, Dim::Phys, 0.0, 1.0, 5, 4).is_err());
}

fn manifest_for(n_videos: usize, seed_: u64) -> DatasetManifest {
    let pool = random_pool(n_videos, seed_);
    let cfg = PrefConfig::default();
    let pairs = build_pairs(&pool, &cfg).unwrap();
    let videos = pool
        .iter()
        .map(|v| VideoEntry {
            id: v.id,
            path: "pool.rwts".into(),
            record: v.id as usize,
            score: v.score,
        })
        .collect();
    DatasetManifest::new(pairs, videos, &cfg, seed_)
}

#[test]
fn splits_are_video_disjoint_and_deterministic() {
    let mut m = manifest_for(150, 3);
    m.pairs.truncate(100);
    m.recount();
    let parts = split(&m, [0.8, 0.1, 0.1], 7).unwrap();
    let ids: Vec<_> = parts.iter().map(|p| p.video_ids()).collect();
    for a in 0..3 {
        for b in a + 1..3 {
            assert!(ids[a].is_disjoint(&ids[b]));
        }
        assert_eq!(parts[a].counts.iter().sum::<usize>(), parts[a].pairs.len());
        assert!(!parts[a].pairs.is_empty());
        parts[a].validate().unwrap();
    }
    assert_eq!(split(&m, [0.8, 0.1, 0.1], 7).unwrap(), parts);

    let halves = split(&m, [0.5, 0.5, 0.0], 1).unwrap();
    assert!(halves[2].pairs.is_empty());
    assert!(split(&m, [0.5, 0.6, 0.0], 1).is_err());

    let mut tiny = m.clone();
    tiny.pairs.truncate(1);
    tiny.recount();
    assert!(matches!(split(&tiny, [0.8, 0.1, 0.1], 1), Err(Error::Config(_))));
}

#[test]
fn manifest_round_trips_through_json() {
    let m = manifest_for(40, 2);
    assert_eq!(m.counts.iter().sum::<usize>(), m.pairs.len());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    m.save(&path).unwrap();
    assert_eq!(DatasetManifest::load(&path).unwrap(), m);
}

#[test]
fn pool_generation_is_deterministic_and_mixed() {
    let w = WorldConfig::default();
    let cfg = PoolConfig {
        n_videos: 60,
        ..PoolConfig::default()
    };
    let a = generate_pool(&cfg, &w, 3, 0).unwrap();
    let b = generate_pool(&cfg, &w, 3, 0).unwrap();
    assert_eq!(a, b);
    let clean = a.iter().filter(|t| t.provenance == Provenance::Clean).count();
    let double = a
        .iter()
        .filter(|t| matches!(&t.provenance, Provenance::Corrupted(k) if k.len() == 2))
        .count();
    assert!(clean > 0 && double > 0 && clean + double < 60);
}
