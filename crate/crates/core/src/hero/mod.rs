//! Hierarchical four-head reward model: tapped encoder, dimension-masked
//! pairwise loss, calibration loss on the combined reward, training, and
//! reward-model metrics.

mod features;
mod model;

#[cfg(test)]
mod tests;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{clip_grad_norm, softplus, AdamW, Tape, Var};
use crate::error::{Error, Result};
use crate::microworld::Dim;
use crate::prefdata::PreferencePair;
use crate::{seed, stats};

pub use features::{raw_feature_dim, raw_features, FeatureScaler};
pub use model::{FeatureBank, HeadVars, Hero, HeroArch, Reward4};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeroTrainConfig {
    pub steps: usize,
    pub batch_pairs: usize,
    pub optimizer: AdamW,
    pub grad_clip: f64,
    pub final_lr_frac: f64,
}

impl Default for HeroTrainConfig {
    fn default() -> Self {
        HeroTrainConfig {
            steps: 800,
            batch_pairs: 64,
            optimizer: AdamW::with_lr(1e-3),
            grad_clip: 1.0,
            final_lr_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeroConfig {
    /// Weight of the dimensional loss in `β·L_D + (1 − β)·L_O`.
    pub beta: f64,
    /// A head receives a pair only when `|Δs_k|` exceeds this margin.
    pub tau_margin: f64,
    /// Weight multiplier of dimension-isolated pairs.
    pub w_boost: f64,
    /// Combination weights `w_k` of the total reward.
    pub weights: [f64; 4],
    /// Taps at increasing depth; when off every head reads the final block.
    pub hierarchical: bool,
    pub train: HeroTrainConfig,
}

impl Default for HeroConfig {
    fn default() -> Self {
        HeroConfig {
            beta: 0.8,
            tau_margin: 2.0,
            w_boost: 2.0,
            weights: [0.25; 4],
            hierarchical: true,
            train: HeroTrainConfig::default(),
        }
    }
}

impl HeroConfig {
    /// `β` may be 0 or 1 to ablate one of the two losses.
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.beta)
            && self.tau_margin >= 0.0
            && self.w_boost >= 1.0
            && self.weights.iter().all(|w| *w >= 0.0)
            && (self.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9
            && self.train.batch_pairs > 0
            && self.train.grad_clip > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid reward model settings {self:?}")));
        }
        self.train.optimizer.validate()
    }

    /// Architecture for `n_frames`-frame rollouts with this configuration.
    pub fn arch(&self, n_frames: usize, gripper_radius: f64, scaler: FeatureScaler) -> HeroArch {
        let mut arch = HeroArch::new(n_frames, gripper_radius, scaler);
        arch.weights = self.weights;
        if self.hierarchical {
            arch
        } else {
            arch.final_layer_only()
        }
    }

    /// `W_k = |Δs_k|/5`, boosted for isolated pairs.
    pub fn pair_weight(&self, pair: &PreferencePair, k: Dim) -> f64 {
        let boost = if pair.isolated { self.w_boost } else { 1.0 };
        pair.delta[k.index()].abs() / 5.0 * boost
    }

    /// `M_k`: strict inequality at the margin.
    pub fn mask(&self, pair: &PreferencePair, k: Dim) -> bool {
        pair.delta[k.index()].abs() > self.tau_margin
    }
}

/// `−log σ(r_winner − r_loser)`.
pub fn bt_loss(r_a: f64, r_b: f64, a_preferred: bool) -> f64 {
    let margin = if a_preferred { r_a - r_b } else { r_b - r_a };
    softplus(-margin)
}

/// Component values of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub dimensional: f64,
    pub overall: f64,
    pub per_head: [f64; 4],
    /// Pairs passing the mask, per head.
    pub unmasked: [usize; 4],
    /// Pairs with distinct summed scores.
    pub overall_pairs: usize,
}

/// Which terms of the composite loss to record.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Part {
    Dimensional,
    Overall,
    Composite,
}

fn sum_scaled(tape: &mut Tape, terms: &[(Var, f64)]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let s = tape.scale(v, w)?;
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    Ok(acc)
}

/// Bradley–Terry terms `softplus(−sign·(r_A − r_B))` weighted per row and summed.
fn weighted_bt(
    tape: &mut Tape,
    r: Var,
    ia: &[usize],
    ib: &[usize],
    sign: &[f64],
    weight: &[f64],
) -> Result<Var> {
    let a = tape.gather_rows(r, ia)?;
    let b = tape.gather_rows(r, ib)?;
    let diff = tape.sub(a, b)?;
    let neg: Vec<f64> = sign.iter().map(|s| -s).collect();
    let margin = tape.row_scale(diff, &neg)?;
    let sp = tape.softplus(margin)?;
    let w = tape.row_scale(sp, weight)?;
    tape.sum(w)
}

fn record_loss(
    model: &Hero,
    tape: &mut Tape,
    bank: &FeatureBank,
    pairs: &[PreferencePair],
    cfg: &HeroConfig,
    part: Part,
) -> Result<(Option<Var>, LossParts)> {
    if pairs.is_empty() {
        return Err(Error::Contract("empty preference batch".into()));
    }
    let mut local: HashMap<usize, usize> = HashMap::new();
    let mut order = Vec::new();
    let mut idx = |id: u64| -> Result<usize> {
        let p = bank.position(id)?;
        Ok(*local.entry(p).or_insert_with(|| {
            order.push(p);
            order.len() - 1
        }))
    };
    let mut ia = Vec::with_capacity(pairs.len());
    let mut ib = Vec::with_capacity(pairs.len());
    for p in pairs {
        ia.push(idx(p.id_a)?);
        ib.push(idx(p.id_b)?);
    }
    let hv = model.forward(tape, &bank.stack(&order))?;
    let b = pairs.len() as f64;
    let mut parts = LossParts::default();

    let mut dim_terms = Vec::new();
    if part != Part::Overall {
        for k in Dim::ALL {
            let weight: Vec<f64> = pairs
                .iter()
                .map(|p| if cfg.mask(p, k) { cfg.pair_weight(p, k) / b } else { 0.0 })
                .collect();
            parts.unmasked[k.index()] = pairs.iter().filter(|p| cfg.mask(p, k)).count();
            if parts.unmasked[k.index()] == 0 {
                continue;
            }
            let sign: Vec<f64> = pairs.iter().map(|p| p.delta[k.index()].signum()).collect();
            let term = weighted_bt(tape, hv.heads[k.index()], &ia, &ib, &sign, &weight)?;
            parts.per_head[k.index()] = tape.scalar(term);
            dim_terms.push((term, 1.0));
        }
    }
    let l_d = sum_scaled(tape, &dim_terms)?;
    parts.dimensional = parts.per_head.iter().sum();

    let mut l_o = None;
    if part != Part::Dimensional {
        let keep: Vec<usize> = (0..pairs.len())
            .filter(|&i| pairs[i].delta.iter().sum::<f64>() != 0.0)
            .collect();
        parts.overall_pairs = keep.len();
        if !keep.is_empty() {
            let sub_a: Vec<usize> = keep.iter().map(|&i| ia[i]).collect();
            let sub_b: Vec<usize> = keep.iter().map(|&i| ib[i]).collect();
            let sign: Vec<f64> = keep.iter().map(|&i| pairs[i].delta.iter().sum::<f64>().signum()).collect();
            let weight = vec![1.0 / keep.len() as f64; keep.len()];
            let term = weighted_bt(tape, hv.total, &sub_a, &sub_b, &sign, &weight)?;
            parts.overall = tape.scalar(term);
            l_o = Some(term);
        }
    }

    let loss = match part {
        Part::Dimensional => l_d,
        Part::Overall => l_o,
        Part::Composite => {
            let mut terms = Vec::new();
            if let Some(v) = l_d {
                terms.push((v, cfg.beta));
            }
            if let Some(v) = l_o {
                terms.push((v, 1.0 - cfg.beta));
            }
            sum_scaled(tape, &terms)?
        }
    };
    parts.total = match part {
        Part::Dimensional => parts.dimensional,
        Part::Overall => parts.overall,
        Part::Composite => loss.map_or(0.0, |v| tape.scalar(v)),
    };
    Ok((loss, parts))
}

fn eval_part(model: &Hero, bank: &FeatureBank, pairs: &[PreferencePair], cfg: &HeroConfig, part: Part) -> Result<LossParts> {
    let mut tape = Tape::new();
    Ok(record_loss(model, &mut tape, bank, pairs, cfg, part)?.1)
}

/// `L_D = Σ_k mean_batch[W_k·M_k·L_BT(R_k)]`. A batch with every mask closed
/// gives 0.
pub fn dimensional_loss(model: &Hero, bank: &FeatureBank, pairs: &[PreferencePair], cfg: &HeroConfig) -> Result<f64> {
    Ok(eval_part(model, bank, pairs, cfg, Part::Dimensional)?.dimensional)
}

/// `L_O`: mean Bradley–Terry loss of the total reward against the
/// summed-score winner; pairs with equal sums are skipped.
pub fn overall_loss(model: &Hero, bank: &FeatureBank, pairs: &[PreferencePair], cfg: &HeroConfig) -> Result<f64> {
    Ok(eval_part(model, bank, pairs, cfg, Part::Overall)?.overall)
}

/// `β·L_D + (1 − β)·L_O` with its components.
pub fn hero_loss(model: &Hero, bank: &FeatureBank, pairs: &[PreferencePair], cfg: &HeroConfig) -> Result<LossParts> {
    eval_part(model, bank, pairs, cfg, Part::Composite)
}

/// Accumulates the gradient of the composite loss into `model.store` and
/// returns its components. A batch that yields no active term leaves the
/// gradients untouched.
pub fn hero_backward(model: &mut Hero, bank: &FeatureBank, pairs: &[PreferencePair], cfg: &HeroConfig) -> Result<LossParts> {
    let mut tape = Tape::new();
    let (loss, parts) = record_loss(model, &mut tape, bank, pairs, cfg, Part::Composite)?;
    if let Some(v) = loss {
        tape.backward(v, &mut [&mut model.store])?;
    }
    Ok(parts)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeroTrainLog {
    pub steps: Vec<LossParts>,
}

impl HeroTrainLog {
    pub fn mean_total(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.steps[range];
        s.iter().map(|p| p.total).sum::<f64>() / s.len().max(1) as f64
    }
}

/// Minimizes the composite loss on minibatches drawn with replacement.
pub fn train_hero(
    model: &mut Hero,
    bank: &FeatureBank,
    pairs: &[PreferencePair],
    cfg: &HeroConfig,
    seed_value: u64,
) -> Result<HeroTrainLog> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    let t = &cfg.train;
    let mut rng = seed::rng(seed_value, &[seed::stream::HERO_BATCH]);
    let mut log = HeroTrainLog::default();
    for step in 0..t.steps {
        let batch: Vec<PreferencePair> = (0..t.batch_pairs)
            .map(|_| pairs[rng.gen_range(0..pairs.len())].clone())
            .collect();
        let parts = hero_backward(model, bank, &batch, cfg)?;
        clip_grad_norm(&mut model.store, t.grad_clip);
        let progress = step as f64 / t.steps.max(1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let opt = AdamW {
            lr: t.optimizer.lr * (t.final_lr_frac + (1.0 - t.final_lr_frac) * cos),
            ..t.optimizer
        };
        opt.step(&mut model.store)?;
        log.steps.push(parts);
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub n_pairs: usize,
    /// Sign agreement of `R_k(A) − R_k(B)` with `Δs_k` on the head's pairs.
    pub accuracy: f64,
    pub n_isolated: usize,
    pub isolated_accuracy: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub n_pairs: usize,
    /// Sign agreement of the total reward with the summed-score winner.
    pub accuracy: f64,
    pub auc: f64,
    pub n_videos: usize,
    pub spearman: f64,
    pub kendall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmEvalReport {
    pub per_head: BTreeMap<String, HeadMetrics>,
    /// Every pair judged by the head of its target dimension.
    pub dimension_accuracy: f64,
    pub overall: OverallMetrics,
}

impl RmEvalReport {
    pub fn head(&self, k: Dim) -> &HeadMetrics {
        &self.per_head[k.name()]
    }
}

/// 1 for agreement, ½ for a tied prediction, 0 otherwise.
fn agreement(pred: f64, truth: f64) -> f64 {
    if pred == 0.0 {
        0.5
    } else if (pred > 0.0) == (truth > 0.0) {
        1.0
    } else {
        0.0
    }
}

/// Metrics of arbitrary per-rollout rewards against pair labels and oracle scores.
pub fn evaluate_rewards(
    rewards: &HashMap<u64, Reward4>,
    scores: &HashMap<u64, [f64; 4]>,
    pairs: &[PreferencePair],
) -> Result<RmEvalReport> {
    if pairs.is_empty() {
        return Err(Error::Config("reward model evaluation needs test pairs".into()));
    }
    let get = |id: u64| {
        rewards
            .get(&id)
            .ok_or_else(|| Error::Input(format!("no reward for rollout {id}")))
    };
    let mut per_head = BTreeMap::new();
    let mut pooled = 0.0;
    for k in Dim::ALL {
        let (mut n, mut acc, mut n_iso, mut acc_iso) = (0usize, 0.0, 0usize, 0.0);
        for p in pairs.iter().filter(|p| p.k == k) {
            let a = agreement(get(p.id_a)?.get(k) - get(p.id_b)?.get(k), p.delta[k.index()]);
            n += 1;
            acc += a;
            if p.isolated {
                n_iso += 1;
                acc_iso += a;
            }
        }
        pooled += acc;
        per_head.insert(
            k.name().to_string(),
            HeadMetrics {
                n_pairs: n,
                accuracy: if n > 0 { acc / n as f64 } else { f64::NAN },
                n_isolated: n_iso,
                isolated_accuracy: if n_iso > 0 { acc_iso / n_iso as f64 } else { f64::NAN },
            },
        );
    }

    let mut diffs = Vec::new();
    let mut labels = Vec::new();
    let mut acc = 0.0;
    for p in pairs {
        let sum: f64 = p.delta.iter().sum();
        if sum == 0.0 {
            continue;
        }
        let d = get(p.id_a)?.total - get(p.id_b)?.total;
        acc += agreement(d, sum);
        diffs.extend([d, -d]);
        labels.extend([sum > 0.0, sum < 0.0]);
    }
    let n_overall = diffs.len() / 2;
    let mut ids: Vec<u64> = pairs.iter().flat_map(|p| [p.id_a, p.id_b]).collect();
    ids.sort_unstable();
    ids.dedup();
    let totals = ids.iter().map(|&id| Ok(get(id)?.total)).collect::<Result<Vec<f64>>>()?;
    let sums = ids
        .iter()
        .map(|id| {
            scores
                .get(id)
                .map(|s| s.iter().sum())
                .ok_or_else(|| Error::Input(format!("no oracle score for rollout {id}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let rank = |f: fn(&[f64], &[f64]) -> Result<f64>| f(&totals, &sums).unwrap_or(f64::NAN);
    Ok(RmEvalReport {
        per_head,
        dimension_accuracy: pooled / pairs.len() as f64,
        overall: OverallMetrics {
            n_pairs: n_overall,
            accuracy: if n_overall > 0 { acc / n_overall as f64 } else { f64::NAN },
            auc: if n_overall > 0 { stats::auc(&diffs, &labels)? } else { f64::NAN },
            n_videos: ids.len(),
            spearman: rank(stats::spearman),
            kendall: rank(stats::kendall_tau_b),
        },
    })
}

/// Scores every rollout of `bank` with `model` and evaluates on `pairs`.
pub fn evaluate_model(model: &Hero, bank: &FeatureBank, pairs: &[PreferencePair]) -> Result<RmEvalReport> {
    let rewards = bank.score_all(model)?;
    let r: HashMap<u64, Reward4> = bank.ids.iter().copied().zip(rewards).collect();
    let s: HashMap<u64, [f64; 4]> = bank.ids.iter().copied().zip(bank.scores.iter().copied()).collect();
    evaluate_rewards(&r, &s, pairs)
}

/// One CSV line per pair: ids, target dimension, label and prediction.
pub fn pair_decisions_csv(rewards: &HashMap<u64, Reward4>, pairs: &[PreferencePair]) -> Result<String> {
    let mut out = String::from("id_a,id_b,dim,isolated,delta,r_a,r_b,correct\n");
    for p in pairs {
        let (a, b) = (
            rewards.get(&p.id_a).ok_or_else(|| Error::Input(format!("no reward for {}", p.id_a)))?,
            rewards.get(&p.id_b).ok_or_else(|| Error::Input(format!("no reward for {}", p.id_b)))?,
        );
        let d = p.delta[p.k.index()];
        let (ra, rb) = (a.get(p.k), b.get(p.k));
        let _ = writeln!(
            out,
            "{},{},{},{},{d},{ra},{rb},{}",
            p.id_a,
            p.id_b,
            p.k,
            p.isolated,
            agreement(ra - rb, d) == 1.0
        );
    }
    Ok(out)
}
