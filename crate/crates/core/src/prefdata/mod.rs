//! Annotated rollout pools and dimension-isolated preference pairs.

#[cfg(test)]
mod tests;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::microworld::{
    corrupt, oracle_score, random_condition, simulate, CorruptionKind, Dim, OracleConfig,
    ScoreVector, TaskKind, Trajectory, WorldConfig,
};
use crate::seed;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedVideo {
    pub id: u64,
    pub traj: Trajectory,
    pub score: ScoreVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id_a: u64,
    pub id_b: u64,
    /// Target dimension.
    pub k: Dim,
    /// Signed score differences `s_A - s_B`, in [`Dim`] order.
    pub delta: [f64; 4],
    pub isolated: bool,
}

impl PreferencePair {
    /// The same comparison with the roles of A and B exchanged.
    pub fn swapped(&self) -> Self {
        PreferencePair {
            id_a: self.id_b,
            id_b: self.id_a,
            k: self.k,
            delta: self.delta.map(|d| -d),
            isolated: self.isolated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: u64,
    /// Trajectory stream, relative to the manifest's directory.
    pub path: String,
    /// Position of the record within the stream.
    pub record: usize,
    pub score: ScoreVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub tau: f64,
    pub eps_iso: f64,
    pub u_max: usize,
    pub seed: u64,
    /// Pair count per dimension, in [`Dim`] order.
    pub counts: [usize; 4],
    pub pairs: Vec<PreferencePair>,
    pub videos: Vec<VideoEntry>,
}

impl DatasetManifest {
    pub fn new(pairs: Vec<PreferencePair>, videos: Vec<VideoEntry>, cfg: &PrefConfig, seed: u64) -> Self {
        let mut m = DatasetManifest {
            schema_version: MANIFEST_VERSION,
            tau: cfg.tau,
            eps_iso: cfg.eps_iso,
            u_max: cfg.u_max,
            seed,
            counts: [0; 4],
            pairs,
            videos,
        };
        m.recount();
        m
    }

    fn recount(&mut self) {
        self.counts = [0; 4];
        for p in &self.pairs {
            self.counts[p.k.index()] += 1;
        }
    }

    pub fn video_ids(&self) -> BTreeSet<u64> {
        self.pairs.iter().flat_map(|p| [p.id_a, p.id_b]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "manifest schema {} is not supported",
                self.schema_version
            )));
        }
        if self.counts.iter().sum::<usize>() != self.pairs.len() {
            return Err(Error::Format("manifest counts do not sum to the pair count".into()));
        }
        let known: BTreeSet<u64> = self.videos.iter().map(|v| v.id).collect();
        if let Some(p) = self.pairs.iter().find(|p| !known.contains(&p.id_a) || !known.contains(&p.id_b)) {
            return Err(Error::Format(format!(
                "pair ({}, {}) references an unknown video",
                p.id_a, p.id_b
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: DatasetManifest = fsutil::read_json(path)?;
        m.validate()?;
        Ok(m)
    }
}

/// Thresholds of the pair selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrefConfig {
    /// Minimum target-dimension gap τ (strict).
    pub tau: f64,
    /// Off-target tolerance ε_iso for the isolation flag (strict).
    pub eps_iso: f64,
    /// Maximum number of pairs a video may appear in, per dimension.
    pub u_max: usize,
    pub max_pairs_per_dim: usize,
}

impl Default for PrefConfig {
    fn default() -> Self {
        PrefConfig {
            tau: 2.0,
            eps_iso: 1.0,
            u_max: 4,
            max_pairs_per_dim: 4000,
        }
    }
}

impl PrefConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.eps_iso >= 0.0) || self.u_max == 0 {
            return Err(Error::Config(format!("invalid pair thresholds {self:?}")));
        }
        Ok(())
    }
}

/// Scores every trajectory with the rule-based oracle. Ids are positions.
pub fn annotate(trajs: Vec<Trajectory>, world: &WorldConfig, oracle: &OracleConfig) -> Result<Vec<AnnotatedVideo>> {
    if trajs.is_empty() {
        return Err(Error::Input("nothing to annotate".into()));
    }
    trajs
        .into_iter()
        .enumerate()
        .map(|(i, traj)| {
            let score = oracle_score(&traj, world, oracle)?;
            Ok(AnnotatedVideo {
                id: i as u64,
                traj,
                score,
            })
        })
        .collect()
}

fn delta(a: &ScoreVector, b: &ScoreVector) -> [f64; 4] {
    let (a, b) = (a.as_array(), b.as_array());
    [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]]
}

fn is_isolated(d: &[f64; 4], k: Dim, eps_iso: f64) -> bool {
    Dim::ALL
        .iter()
        .filter(|&&l| l != k)
        .all(|l| d[l.index()].abs() < eps_iso)
}

/// Greedy dimension-isolated pair selection.
///
/// All pairs with `|Δ_k| > τ` are ranked by decreasing `|Δ_k|` (ties by the
/// smaller then larger video id) and accepted while neither video has been
/// used `u_max` times, up to `max_pairs`. The preferred video on `k` becomes A.
pub fn select_pairs(
    pool: &[AnnotatedVideo],
    k: Dim,
    tau: f64,
    eps_iso: f64,
    max_pairs: usize,
    u_max: usize,
) -> Result<Vec<PreferencePair>> {
    if !(tau > 0.0) || !(eps_iso >= 0.0) {
        return Err(Error::Contract(format!("invalid thresholds τ={tau}, ε_iso={eps_iso}")));
    }
    if pool.len() < 2 {
        return Err(Error::Contract("pair selection needs at least two videos".into()));
    }
    let ki = k.index();
    let mut cands: Vec<(f64, u64, u64, usize, usize)> = Vec::new();
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            let d = pool[i].score.get(k) - pool[j].score.get(k);
            if d.abs() > tau {
                let (lo, hi) = if pool[i].id < pool[j].id {
                    (pool[i].id, pool[j].id)
                } else {
                    (pool[j].id, pool[i].id)
                };
                cands.push((d.abs(), lo, hi, i, j));
            }
        }
    }
    cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used = vec![0usize; pool.len()];
    let mut out = Vec::new();
    for (_, _, _, i, j) in cands {
        if out.len() >= max_pairs {
            break;
        }
        if used[i] >= u_max || used[j] >= u_max {
            continue;
        }
        used[i] += 1;
        used[j] += 1;
        let (a, b) = if pool[i].score.get(k) > pool[j].score.get(k) {
            (&pool[i], &pool[j])
        } else {
            (&pool[j], &pool[i])
        };
        let d = delta(&a.score, &b.score);
        debug_assert!(d[ki] > tau);
        out.push(PreferencePair {
            id_a: a.id,
            id_b: b.id,
            k,
            delta: d,
            isolated: is_isolated(&d, k, eps_iso),
        });
    }
    Ok(out)
}

/// Pairs for all four dimensions.
pub fn build_pairs(pool: &[AnnotatedVideo], cfg: &PrefConfig) -> Result<Vec<PreferencePair>> {
    cfg.validate()?;
    let mut pairs = Vec::new();
    for k in Dim::ALL {
        pairs.extend(select_pairs(pool, k, cfg.tau, cfg.eps_iso, cfg.max_pairs_per_dim, cfg.u_max)?);
    }
    Ok(pairs)
}

/// Splits a manifest into video-disjoint train/validation/test manifests.
///
/// Pairs are visited in a seeded order and placed in the split that is
/// furthest below its target share; videos follow their first pair. A pair
/// whose videos already sit in different splits is dropped.
pub fn split(manifest: &DatasetManifest, fractions: [f64; 3], seed: u64) -> Result<[DatasetManifest; 3]> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut order: Vec<usize> = (0..manifest.pairs.len()).collect();
    order.shuffle(&mut seed::rng(seed, &[seed::stream::SPLIT]));

    let mut home: BTreeMap<u64, usize> = BTreeMap::new();
    let mut buckets: [Vec<usize>; 3] = Default::default();
    let mut placed = 0usize;
    for idx in order {
        let p = &manifest.pairs[idx];
        let target = match (home.get(&p.id_a), home.get(&p.id_b)) {
            (Some(&a), Some(&b)) if a != b => continue,
            (Some(&a), _) => a,
            (_, Some(&b)) => b,
            (None, None) => {
                // largest deficit against the target share
                let mut best = 0;
                let mut best_gap = f64::NEG_INFINITY;
                for s in 0..3 {
                    if fractions[s] == 0.0 {
                        continue;
                    }
                    let gap = fractions[s] * (placed + 1) as f64 - buckets[s].len() as f64;
                    if gap > best_gap {
                        best_gap = gap;
                        best = s;
                    }
                }
                best
            }
        };
        home.insert(p.id_a, target);
        home.insert(p.id_b, target);
        buckets[target].push(idx);
        placed += 1;
    }
    for s in 0..3 {
        if fractions[s] > 0.0 && buckets[s].is_empty() {
            return Err(Error::Config(format!(
                "pool too small: split {s} with fraction {} received no pairs",
                fractions[s]
            )));
        }
    }
    let make = |s: usize| {
        let mut idx = buckets[s].clone();
        idx.sort_unstable();
        let pairs: Vec<PreferencePair> = idx.iter().map(|&i| manifest.pairs[i].clone()).collect();
        let ids: BTreeSet<u64> = pairs.iter().flat_map(|p| [p.id_a, p.id_b]).collect();
        let mut m = manifest.clone();
        m.pairs = pairs;
        m.videos = manifest.videos.iter().filter(|v| ids.contains(&v.id)).cloned().collect();
        m.recount();
        m
    };
    Ok([make(0), make(1), make(2)])
}

/// Composition of the rollout pool that feeds annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub n_videos: usize,
    pub horizon: usize,
    /// Fraction of rollouts left clean.
    pub clean_frac: f64,
    /// Fraction of rollouts with two defects; the rest get one.
    pub double_frac: f64,
    pub severity_min: f64,
    pub severity_max: f64,
    /// Relative frequency of each defect kind, in `CorruptionKind::ALL` order.
    pub kind_weights: [f64; 6],
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            n_videos: 4000,
            horizon: 32,
            clean_frac: 0.25,
            double_frac: 0.2,
            severity_min: 0.5,
            severity_max: 1.0,
            kind_weights: [1.0; 6],
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_videos >= 2
            && self.horizon >= 4
            && (0.0..=1.0).contains(&self.clean_frac)
            && (0.0..=1.0).contains(&self.double_frac)
            && self.clean_frac + self.double_frac <= 1.0
            && 0.0 < self.severity_min
            && self.severity_min <= self.severity_max
            && self.severity_max <= 1.0
            && self.kind_weights.iter().all(|w| *w >= 0.0)
            && self.kind_weights.iter().sum::<f64>() > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid pool settings {self:?}")))
        }
    }
}

fn draw_kind<R: Rng>(rng: &mut R, weights: &[f64; 6]) -> CorruptionKind {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (k, w) in CorruptionKind::ALL.iter().zip(weights) {
        if u < *w {
            return *k;
        }
        u -= w;
    }
    CorruptionKind::Noise
}

/// Simulates and corrupts the rollout pool. Condition ids start at `id_offset`.
pub fn generate_pool(cfg: &PoolConfig, world: &WorldConfig, seed_: u64, id_offset: u64) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let mut rng = seed::rng(seed_, &[seed::stream::POOL]);
    let mut out = Vec::with_capacity(cfg.n_videos);
    for i in 0..cfg.n_videos {
        let id = id_offset + i as u64;
        let task = TaskKind::ALL[i % TaskKind::ALL.len()];
        let mut crng = seed::rng(seed_, &[seed::stream::CONDITIONS, id]);
        let cond = random_condition(&mut crng, id, Some(task), world);
        let sim_seed = seed::derive(seed_, &[seed::stream::SIMULATE, id]);
        let mut traj = simulate(&cond, cfg.horizon, sim_seed, world)?;
        let u: f64 = rng.gen();
        let n_defects = if u < cfg.clean_frac {
            0
        } else if u < cfg.clean_frac + cfg.double_frac {
            2
        } else {
            1
        };
        let mut kinds: Vec<CorruptionKind> = Vec::new();
        while kinds.len() < n_defects {
            let k = draw_kind(&mut rng, &cfg.kind_weights);
            if !kinds.contains(&k) {
                kinds.push(k);
            }
        }
        // re-simulation must come first
        kinds.sort_by_key(|k| *k != CorruptionKind::TaskSwap);
        for k in kinds {
            let sev = rng.gen_range(cfg.severity_min..=cfg.severity_max);
            traj = corrupt(&traj, k, sev, rng.gen(), world)?;
        }
        out.push(traj);
    }
    Ok(out)
}
