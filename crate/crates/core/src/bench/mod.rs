//! Held-out benchmark of a policy: oracle scoring of sampled rollouts on
//! the four dimensions, the weighted overall score, and report comparison.


use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowgen::{sample, sample_batch, Denoiser, NoiseSchedule};
use crate::fpo::sample_to_trajectory;
use crate::microworld::{oracle_score, random_condition, Condition, OracleConfig, TaskKind, WorldConfig};
use crate::seed;

/// Weights of `(phys, embod, task, vis)` in the overall score.
pub const DIM_WEIGHTS: [f64; 4] = [0.2, 0.3, 0.4, 0.1];

/// Maps a training-scale score in `[1, 6]` to the report scale `[1, 10]`.
pub fn to_report_scale(s6: f64) -> f64 {
    1.0 + 9.0 * (s6 - 1.0) / 5.0
}

pub fn from_report_scale(s10: f64) -> f64 {
    1.0 + 5.0 * (s10 - 1.0) / 9.0
}

/// `S_O = 10·(0.4·S_task + 0.3·S_embod + 0.2·S_phys + 0.1·S_vis)` from
/// report-scale means in `(phys, embod, task, vis)` order.
pub fn overall_score(s10: [f64; 4]) -> f64 {
    10.0 * s10.iter().zip(DIM_WEIGHTS).map(|(s, w)| s * w).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub n_conditions: usize,
    pub rollouts_per_condition: usize,
    pub sample_steps: usize,
    /// Id of the first suite condition; training ids must stay below it.
    pub id_offset: u64,
    pub max_skip_frac: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_conditions: 64,
            rollouts_per_condition: 8,
            sample_steps: 24,
            id_offset: 1 << 40,
            max_skip_frac: 0.2,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_conditions == 0
            || self.rollouts_per_condition == 0
            || self.sample_steps == 0
            || !(0.0..=1.0).contains(&self.max_skip_frac)
        {
            return Err(Error::Config(format!("invalid benchmark settings {self:?}")));
        }
        Ok(())
    }
}

/// Held-out conditions and the sampling protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSuite {
    pub id: String,
    pub conditions: Vec<Condition>,
    pub rollouts_per_condition: usize,
    pub sample_steps: usize,
    pub seed: u64,
    pub max_skip_frac: f64,
}

impl BenchSuite {
    /// Conditions cycle through every task kind.
    pub fn generate(cfg: &BenchConfig, world: &WorldConfig, seed_value: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(seed_value, &[seed::stream::BENCH]);
        let conditions: Vec<Condition> = (0..cfg.n_conditions)
            .map(|i| {
                let task = TaskKind::ALL[i % TaskKind::ALL.len()];
                random_condition(&mut rng, cfg.id_offset + i as u64, Some(task), world)
            })
            .collect();
        Ok(Self::from_conditions(conditions, cfg, seed_value))
    }

    pub fn from_conditions(conditions: Vec<Condition>, cfg: &BenchConfig, seed_value: u64) -> Self {
        let mut tags: Vec<u64> = conditions.iter().map(|c| c.id).collect();
        tags.extend([cfg.rollouts_per_condition as u64, cfg.sample_steps as u64]);
        BenchSuite {
            id: format!("suite-{:016x}", seed::derive(seed_value, &tags)),
            conditions,
            rollouts_per_condition: cfg.rollouts_per_condition,
            sample_steps: cfg.sample_steps,
            seed: seed_value,
            max_skip_frac: cfg.max_skip_frac,
        }
    }

    /// Fails if any suite condition id occurs in `training_ids`.
    pub fn check_disjoint(&self, training_ids: &BTreeSet<u64>) -> Result<()> {
        match self.conditions.iter().find(|c| training_ids.contains(&c.id)) {
            Some(c) => Err(Error::Config(format!("benchmark condition {} was used in training", c.id))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub id: u64,
    pub task: TaskKind,
    pub n_rollouts: usize,
    /// Mean oracle scores on the `[1, 6]` scale.
    pub mean_s6: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub suite_id: String,
    pub label: String,
    pub n_samples: usize,
    pub skipped: usize,
    /// Dimension means on the training scale, `(phys, embod, task, vis)`.
    pub s6: [f64; 4],
    /// Dimension means on the report scale.
    pub s10: [f64; 4],
    pub s_o: f64,
    pub per_condition: Vec<ConditionResult>,
}

impl BenchReport {
    /// Aggregates per-condition means weighted by their rollout counts.
    pub fn from_conditions(suite_id: &str, label: &str, per_condition: Vec<ConditionResult>, skipped: usize) -> Result<Self> {
        let n: usize = per_condition.iter().map(|c| c.n_rollouts).sum();
        if n == 0 {
            return Err(Error::Input("benchmark report without rollouts".into()));
        }
        let mut s6 = [0.0; 4];
        for c in &per_condition {
            for k in 0..4 {
                s6[k] += c.mean_s6[k] * c.n_rollouts as f64 / n as f64;
            }
        }
        let s10 = s6.map(to_report_scale);
        Ok(BenchReport {
            suite_id: suite_id.into(),
            label: label.into(),
            n_samples: n,
            skipped,
            s6,
            s10,
            s_o: overall_score(s10),
            per_condition,
        })
    }

    pub const CSV_HEADER: &'static str = "label,suite,n_samples,s_phys,s_embod,s_task,s_vis,s_o";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.label, self.suite_id, self.n_samples, self.s10[0], self.s10[1], self.s10[2], self.s10[3], self.s_o
        )
    }
}

/// Samples the suite's rollouts from `policy` and scores them with the oracle.
pub fn evaluate<D: Denoiser + ?Sized>(
    policy: &D,
    suite: &BenchSuite,
    schedule: &NoiseSchedule,
    world: &WorldConfig,
    oracle: &OracleConfig,
    label: &str,
) -> Result<BenchReport> {
    if suite.conditions.is_empty() || suite.rollouts_per_condition == 0 {
        return Err(Error::Input("empty benchmark suite".into()));
    }
    let m = suite.rollouts_per_condition;
    let mut per_condition = Vec::with_capacity(suite.conditions.len());
    let mut skipped = 0;
    for c in &suite.conditions {
        let feats = c.features();
        let keys: Vec<u64> = (0..m as u64).map(|r| seed::derive(suite.seed, &[seed::stream::BENCH, c.id, r])).collect();
        let cond = Array2::from_shape_fn((m, feats.len()), |(_, j)| feats[j]);
        let samples: Vec<Option<Vec<f64>>> = match sample_batch(policy, &cond, schedule, suite.sample_steps, &keys) {
            Ok(out) => out.into_iter().map(Some).collect(),
            Err(Error::NumericFault { .. }) => keys
                .iter()
                .map(|&k| sample(policy, &feats, schedule, suite.sample_steps, k).ok())
                .collect(),
            Err(e) => return Err(e),
        };
        let mut sum = [0.0; 4];
        let mut n = 0;
        for (s, &k) in samples.iter().zip(&keys) {
            let scored = s
                .as_ref()
                .and_then(|v| sample_to_trajectory(v, c, k).ok())
                .and_then(|t| oracle_score(&t, world, oracle).ok());
            match scored {
                Some(score) => {
                    for (acc, x) in sum.iter_mut().zip(score.as_array()) {
                        *acc += x;
                    }
                    n += 1;
                }
                None => skipped += 1,
            }
        }
        if n > 0 {
            per_condition.push(ConditionResult {
                id: c.id,
                task: c.task,
                n_rollouts: n,
                mean_s6: sum.map(|s| s / n as f64),
            });
        }
    }
    let total = suite.conditions.len() * m;
    if skipped as f64 > suite.max_skip_frac * total as f64 {
        return Err(Error::numeric(format!("benchmark sampling failed for {skipped} of {total} rollouts")));
    }
    BenchReport::from_conditions(&suite.id, label, per_condition, skipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    High,
    Medium,
    Low,
}

impl Confidence {
    fn from_stability(p: f64, resampled: bool) -> Self {
        if !resampled {
            Confidence::Low
        } else if p >= 0.95 {
            Confidence::High
        } else if p >= 0.8 {
            Confidence::Medium
        } else {
            Confidence::Low
        }
    }
}

/// Deltas `b − a` per dimension (report scale) and overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub suite_id: String,
    pub label_a: String,
    pub label_b: String,
    pub delta_s10: [f64; 4],
    pub delta_s_o: f64,
    /// Fraction of bootstrap resamples whose delta has the sign of the point delta.
    pub stability: [f64; 5],
    pub confidence: [Confidence; 5],
    pub resamples: usize,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Compares two reports on the same suite, resampling conditions (paired)
/// to measure how stable the sign of each delta is.
pub fn compare(a: &BenchReport, b: &BenchReport, seed_value: u64) -> Result<ComparisonSummary> {
    if a.suite_id != b.suite_id {
        return Err(Error::Contract(format!(
            "reports come from different suites ({} and {})",
            a.suite_id, b.suite_id
        )));
    }
    let delta_s10: [f64; 4] = std::array::from_fn(|k| b.s10[k] - a.s10[k]);
    let point: [f64; 5] = [delta_s10[0], delta_s10[1], delta_s10[2], delta_s10[3], b.s_o - a.s_o];
    let paired: Vec<(&ConditionResult, &ConditionResult)> = a
        .per_condition
        .iter()
        .filter_map(|ca| b.per_condition.iter().find(|cb| cb.id == ca.id).map(|cb| (ca, cb)))
        .collect();
    let resampled = paired.len() > 1;
    let mut agree = [0usize; 5];
    let mut rng = seed::rng(seed_value, &[seed::stream::BENCH, 1]);
    let resamples = if resampled { BOOTSTRAP_RESAMPLES } else { 0 };
    for _ in 0..resamples {
        let (mut sa, mut sb) = (Vec::with_capacity(paired.len()), Vec::with_capacity(paired.len()));
        for _ in 0..paired.len() {
            let (ca, cb) = paired[rng.gen_range(0..paired.len())];
            sa.push(ca.clone());
            sb.push(cb.clone());
        }
        let ra = BenchReport::from_conditions(&a.suite_id, "", sa, 0)?;
        let rb = BenchReport::from_conditions(&b.suite_id, "", sb, 0)?;
        let d = [
            rb.s10[0] - ra.s10[0],
            rb.s10[1] - ra.s10[1],
            rb.s10[2] - ra.s10[2],
            rb.s10[3] - ra.s10[3],
            rb.s_o - ra.s_o,
        ];
        for k in 0..5 {
            agree[k] += usize::from(d[k].signum() == point[k].signum());
        }
    }
    let stability: [f64; 5] = std::array::from_fn(|k| {
        if resampled {
            agree[k] as f64 / resamples as f64
        } else {
            1.0
        }
    });
    Ok(ComparisonSummary {
        suite_id: a.suite_id.clone(),
        label_a: a.label.clone(),
        label_b: b.label.clone(),
        delta_s10,
        delta_s_o: point[4],
        stability,
        confidence: stability.map(|p| Confidence::from_stability(p, resampled)),
        resamples,
    })
}
