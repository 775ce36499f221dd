//! Reward-driven policy optimization for flow policies: experience collection,
//! critic-based advantages, an importance ratio built from denoising losses
//! under shared noise draws, the clipped surrogate, and supervised
//! pretraining of the starting policy.

mod critic;


use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::{clip_grad_norm, AdamW, Tape, Var};
use crate::error::{Error, Result};
use crate::flowgen::{
    cfm_loss, draw_noise, sample, sample_batch, train_denoiser, CfmEstimate, Denoiser, FlowArch, FlowPolicy,
    NoiseSchedule, Normalizer, TrainConfig, TrainLog,
};
use crate::hero::Hero;
use crate::microworld::{Condition, Provenance, Trajectory};
use crate::seed;

pub use critic::{Critic, CriticArch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpoConfig {
    /// Clip range `ε` of the ratio.
    pub clip_eps: f64,
    /// Optimization epochs `K` over each buffer.
    pub epochs: usize,
    /// Minibatch size `B`.
    pub batch_size: usize,
    /// Noise draws `N` per denoising-loss estimate.
    pub n_cfm: usize,
    /// Value-loss coefficient `c_v`.
    pub value_coef: f64,
    pub iterations: usize,
    pub normalize_advantages: bool,
    /// Conditions sampled per iteration, one rollout each.
    pub rollouts_per_iter: usize,
    pub sample_steps: usize,
    pub policy_opt: AdamW,
    pub critic_opt: AdamW,
    pub grad_clip: f64,
    /// Weights `w_k` of the scalar reward `R = Σ w_k R_k`.
    pub reward_weights: [f64; 4],
    /// Largest tolerated fraction of failed samples per collection.
    pub max_skip_frac: f64,
}

impl Default for FpoConfig {
    fn default() -> Self {
        FpoConfig {
            clip_eps: 0.2,
            epochs: 4,
            batch_size: 64,
            n_cfm: 5,
            value_coef: 0.5,
            iterations: 20,
            normalize_advantages: true,
            rollouts_per_iter: 128,
            sample_steps: 24,
            policy_opt: AdamW::with_lr(3e-4),
            critic_opt: AdamW::with_lr(1e-3),
            grad_clip: 1.0,
            reward_weights: [0.25; 4],
            max_skip_frac: 0.2,
        }
    }
}

impl FpoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.clip_eps > 0.0
            && self.clip_eps < 1.0
            && self.n_cfm >= 1
            && self.batch_size > 0
            && self.value_coef > 0.0
            && self.rollouts_per_iter > 0
            && self.sample_steps > 0
            && self.grad_clip > 0.0
            && self.reward_weights.iter().all(|w| w.is_finite())
            && (0.0..=1.0).contains(&self.max_skip_frac);
        if !ok {
            return Err(Error::Config(format!("invalid alignment settings {self:?}")));
        }
        self.policy_opt.validate()?;
        self.critic_opt.validate()
    }
}

/// A conditioning input of the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u64,
    pub features: Vec<f64>,
    /// Scene and instruction, when the samples are trajectories.
    pub condition: Option<Condition>,
}

impl Prompt {
    pub fn from_condition(c: &Condition) -> Self {
        Prompt {
            id: c.id,
            features: c.features(),
            condition: Some(c.clone()),
        }
    }
}

/// Frozen scorer of sampled data vectors.
pub trait RewardModel {
    /// Four reward components per sample.
    fn score(&self, prompts: &[&Prompt], samples: &[&[f64]]) -> Result<Vec<[f64; 4]>>;
}

/// Rebuilds a policy sample as a trajectory of `condition`.
pub fn sample_to_trajectory(sample: &[f64], condition: &Condition, sim_seed: u64) -> Result<Trajectory> {
    let d = condition.layout().dim();
    if d == 0 || sample.len() % d != 0 {
        return Err(Error::Contract(format!("sample of {} values is not a stack of {d}-wide frames", sample.len())));
    }
    Trajectory::new(sample.to_vec(), sample.len() / d, condition.clone(), Provenance::Generated, sim_seed)
}

impl RewardModel for Hero {
    fn score(&self, prompts: &[&Prompt], samples: &[&[f64]]) -> Result<Vec<[f64; 4]>> {
        let trajs = prompts
            .iter()
            .zip(samples)
            .map(|(p, s)| {
                let c = p
                    .condition
                    .as_ref()
                    .ok_or_else(|| Error::Contract("trajectory reward needs the scene of every prompt".into()))?;
                sample_to_trajectory(s, c, p.id)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        Ok(self.score_batch(&refs)?.into_iter().map(|r| r.heads).collect())
    }
}

/// One rollout of the old policy with its reward, advantage and cached loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceRecord {
    pub prompt_id: u64,
    pub v: Vec<f64>,
    pub c: Vec<f64>,
    pub reward: f64,
    pub heads: [f64; 4],
    /// Critic value at collection time.
    pub value: f64,
    /// `R − V`, normalized over the buffer when configured.
    pub advantage: f64,
    /// Loss of the old policy under the draws of `cfm_old.rng_key`.
    pub cfm_old: CfmEstimate,
    pub iteration: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Buffer {
    pub records: Vec<ExperienceRecord>,
    pub skipped: usize,
}

/// Samples one rollout per prompt from the old policy, scores it, and
/// caches everything the update phase needs.
pub fn collect(
    policy_old: &FlowPolicy,
    reward: &dyn RewardModel,
    critic: &Critic,
    prompts: &[Prompt],
    schedule: &NoiseSchedule,
    cfg: &FpoConfig,
    iteration: u64,
    seed_value: u64,
) -> Result<Buffer> {
    if prompts.is_empty() {
        return Err(Error::Input("no conditions to collect experience on".into()));
    }
    let key = |stream: u64, id: u64| seed::derive(seed_value, &[stream, iteration, id]);
    let features: Vec<&[f64]> = prompts.iter().map(|p| &p.features[..]).collect();
    let keys: Vec<u64> = prompts.iter().map(|p| key(seed::stream::COLLECT, p.id)).collect();
    let samples = sample_rows(policy_old, &features, schedule, cfg.sample_steps, &keys)?;
    let kept: Vec<usize> = (0..prompts.len()).filter(|&i| samples[i].is_some()).collect();
    let skipped = prompts.len() - kept.len();
    if skipped as f64 > cfg.max_skip_frac * prompts.len() as f64 {
        return Err(Error::numeric(format!(
            "sampling failed for {skipped} of {} conditions in iteration {iteration}",
            prompts.len()
        )));
    }
    let ps: Vec<&Prompt> = kept.iter().map(|&i| &prompts[i]).collect();
    let vs: Vec<&[f64]> = kept.iter().map(|&i| samples[i].as_deref().expect("kept")).collect();
    let cs: Vec<&[f64]> = ps.iter().map(|p| &p.features[..]).collect();
    let heads = reward.score(&ps, &vs)?;
    let values = critic.values(&vs, &cs)?;
    let rewards: Vec<f64> = heads
        .iter()
        .map(|h| h.iter().zip(&cfg.reward_weights).map(|(r, w)| r * w).sum())
        .collect();
    let mut adv: Vec<f64> = rewards.iter().zip(&values).map(|(r, v)| r - v).collect();
    if cfg.normalize_advantages {
        normalize(&mut adv);
    }
    let mut records = Vec::with_capacity(kept.len());
    for (j, p) in ps.iter().enumerate() {
        let cfm_old = cfm_loss(policy_old, vs[j], cs[j], schedule, cfg.n_cfm, key(seed::stream::CFM_KEY, p.id))?;
        records.push(ExperienceRecord {
            prompt_id: p.id,
            v: vs[j].to_vec(),
            c: cs[j].to_vec(),
            reward: rewards[j],
            heads: heads[j],
            value: values[j],
            advantage: adv[j],
            cfm_old,
            iteration,
        });
    }
    if !records.iter().all(|r| r.reward.is_finite() && r.value.is_finite()) {
        return Err(Error::numeric("collected rewards or values"));
    }
    Ok(Buffer { records, skipped })
}

/// Samples one row per condition in chunks, isolating rows whose sampling
/// fails numerically as `None`.
fn sample_rows(
    policy: &FlowPolicy,
    features: &[&[f64]],
    schedule: &NoiseSchedule,
    steps: usize,
    keys: &[u64],
) -> Result<Vec<Option<Vec<f64>>>> {
    let mut samples = Vec::with_capacity(features.len());
    for (chunk, ks) in features.chunks(64).zip(keys.chunks(64)) {
        let cond = Array2::from_shape_fn((chunk.len(), policy.cond_dim()), |(i, j)| chunk[i][j]);
        match sample_batch(policy, &cond, schedule, steps, ks) {
            Ok(out) => samples.extend(out.into_iter().map(Some)),
            Err(Error::NumericFault { .. }) => {
                for (f, &k) in chunk.iter().zip(ks) {
                    samples.push(sample(policy, f, schedule, steps, k).ok());
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(samples)
}

/// Rollouts of `policy` on `conditions`, one each, for annotation alongside
/// simulated ones. Rows whose sampling fails numerically are dropped.
pub fn policy_rollouts(
    policy: &FlowPolicy,
    conditions: &[Condition],
    schedule: &NoiseSchedule,
    steps: usize,
    seed_value: u64,
) -> Result<Vec<Trajectory>> {
    let features: Vec<Vec<f64>> = conditions.iter().map(|c| c.features()).collect();
    let refs: Vec<&[f64]> = features.iter().map(|f| &f[..]).collect();
    let keys: Vec<u64> = conditions.iter().map(|c| seed::derive(seed_value, &[seed::stream::POOL, c.id])).collect();
    let samples = sample_rows(policy, &refs, schedule, steps, &keys)?;
    conditions
        .iter()
        .zip(samples)
        .zip(&keys)
        .filter_map(|((c, v), &k)| v.map(|v| sample_to_trajectory(&v, c, k)))
        .collect()
}

/// Centers to zero mean and scales to unit variance; a constant batch becomes all zeros.
fn normalize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for a in x.iter_mut() {
        *a = if sd > 1e-12 { (*a - mean) / sd } else { 0.0 };
    }
}

/// `exp(L_old − L_new)` with `L_new` evaluated under the record's draws.
pub fn ppo_ratio(
    policy_new: &FlowPolicy,
    record: &ExperienceRecord,
    schedule: &NoiseSchedule,
    cfg: &FpoConfig,
) -> Result<f64> {
    if record.cfm_old.n_samples != cfg.n_cfm {
        return Err(Error::Contract(format!(
            "record was collected with {} noise draws, the ratio uses {}",
            record.cfm_old.n_samples, cfg.n_cfm
        )));
    }
    let new = cfm_loss(policy_new, &record.v, &record.c, schedule, cfg.n_cfm, record.cfm_old.rng_key)?;
    Ok(ratio_from_losses(record.cfm_old.value, new.value))
}

pub fn ratio_from_losses(loss_old: f64, loss_new: f64) -> f64 {
    (loss_old - loss_new).exp()
}

/// `−min(r·Â, clip(r, 1 − ε, 1 + ε)·Â)`.
pub fn policy_loss(ratio: f64, advantage: f64, eps: f64) -> f64 {
    -(ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// True when the ratio lies outside the clip range.
pub fn is_clipped(ratio: f64, eps: f64) -> bool {
    (ratio - 1.0).abs() > eps
}

/// `(R − V_ψ(v))²` under the current critic.
pub fn value_loss(critic: &Critic, record: &ExperienceRecord) -> Result<f64> {
    let v = critic.values(&[&record.v], &[&record.c])?[0];
    Ok((record.reward - v).powi(2))
}

/// Records `L_new` of every record under its own draws (`n×1`).
pub fn record_losses_on_tape(
    policy: &FlowPolicy,
    tape: &mut Tape,
    records: &[&ExperienceRecord],
    schedule: &NoiseSchedule,
    n_cfm: usize,
) -> Result<Var> {
    let (d, l, c) = (policy.arch.data_dim, policy.arch.latent_dim, policy.arch.cond_dim);
    let rows = records.len() * n_cfm;
    let mut z = Array2::zeros((rows, l));
    let mut cond = Array2::zeros((rows, c));
    let mut sigmas = Vec::with_capacity(rows);
    let mut eps = Array2::zeros((rows, l));
    for (i, r) in records.iter().enumerate() {
        if r.cfm_old.n_samples != n_cfm || r.v.len() != d || r.c.len() != c {
            return Err(Error::Contract(format!("record {} does not match the policy and draw count", r.prompt_id)));
        }
        let zr = policy.encode(&r.v, &r.c);
        let draws = draw_noise(r.cfm_old.rng_key, n_cfm, l, schedule);
        for k in 0..n_cfm {
            let row = i * n_cfm + k;
            z.row_mut(row).assign(&ndarray::ArrayView1::from(&zr[..]));
            cond.row_mut(row).assign(&ndarray::ArrayView1::from(&r.c[..]));
            eps.row_mut(row).assign(&draws.eps.row(k));
        }
        sigmas.extend(draws.sigmas);
    }
    let draws = crate::flowgen::NoiseDraws { sigmas, eps };
    let terms = policy.terms_on_tape(tape, &z, &cond, &draws, schedule)?;
    tape.segment_mean(terms, n_cfm)
}

/// Per-iteration statistics, one JSON line each.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: u64,
    pub n_records: usize,
    pub skipped: usize,
    pub mean_reward: f64,
    pub mean_heads: [f64; 4],
    /// Mean of `R − V` before normalization.
    pub mean_raw_advantage: f64,
    pub mean_advantage: f64,
    /// Fraction of ratio evaluations outside `[1 − ε, 1 + ε]`.
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub policy_grad_norm: f64,
    pub critic_grad_norm: f64,
    pub updates: usize,
    /// Every ratio evaluated during the update phase, in order.
    #[serde(skip)]
    pub ratios: Vec<f64>,
}

/// One collection phase followed by `K` epochs of joint policy and critic
/// updates. On error the policy and critic are left as they were.
pub fn train_iteration(
    policy: &mut FlowPolicy,
    critic: &mut Critic,
    reward: &dyn RewardModel,
    prompts: &[Prompt],
    schedule: &NoiseSchedule,
    cfg: &FpoConfig,
    iteration: u64,
    seed_value: u64,
) -> Result<IterationStats> {
    cfg.validate()?;
    let buffer = collect(policy, reward, critic, prompts, schedule, cfg, iteration, seed_value)?;
    let mut new_policy = policy.clone();
    let mut new_critic = critic.clone();
    let stats = optimize(&mut new_policy, &mut new_critic, &buffer, schedule, cfg, iteration, seed_value)?;
    *policy = new_policy;
    *critic = new_critic;
    Ok(stats)
}

/// Update phase over a collected buffer.
pub fn optimize(
    policy: &mut FlowPolicy,
    critic: &mut Critic,
    buffer: &Buffer,
    schedule: &NoiseSchedule,
    cfg: &FpoConfig,
    iteration: u64,
    seed_value: u64,
) -> Result<IterationStats> {
    let recs = &buffer.records;
    let n = recs.len().max(1) as f64;
    let mut stats = IterationStats {
        iteration,
        n_records: recs.len(),
        skipped: buffer.skipped,
        mean_reward: recs.iter().map(|r| r.reward).sum::<f64>() / n,
        mean_raw_advantage: recs.iter().map(|r| r.reward - r.value).sum::<f64>() / n,
        mean_advantage: recs.iter().map(|r| r.advantage).sum::<f64>() / n,
        ..IterationStats::default()
    };
    for k in 0..4 {
        stats.mean_heads[k] = recs.iter().map(|r| r.heads[k]).sum::<f64>() / n;
    }
    let mut rng = seed::rng(seed_value, &[seed::stream::FPO_SHUFFLE, iteration]);
    let mut order: Vec<usize> = (0..recs.len()).collect();
    let (mut pl_sum, mut vl_sum, mut pg_sum, mut cg_sum) = (0.0, 0.0, 0.0, 0.0);
    let mut clipped = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&ExperienceRecord> = idx.iter().map(|&i| &recs[i]).collect();
            let mut tape = Tape::new();
            let l_new = record_losses_on_tape(policy, &mut tape, &batch, schedule, cfg.n_cfm)?;
            let old: Array2<f64> = Array2::from_shape_fn((batch.len(), 1), |(i, _)| batch[i].cfm_old.value);
            let adv: Vec<f64> = batch.iter().map(|r| r.advantage).collect();
            let neg = tape.scale(l_new, -1.0)?;
            let log_r = tape.add_const(neg, &old)?;
            let ratio = tape.exp(log_r)?;
            let unclipped = tape.row_scale(ratio, &adv)?;
            let bounded = tape.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)?;
            let clipped_term = tape.row_scale(bounded, &adv)?;
            let surrogate = tape.min(unclipped, clipped_term)?;
            let mean_s = tape.mean(surrogate)?;
            let pl = tape.scale(mean_s, -1.0)?;

            let vs: Vec<&[f64]> = batch.iter().map(|r| &r.v[..]).collect();
            let cs: Vec<&[f64]> = batch.iter().map(|r| &r.c[..]).collect();
            let v = critic.forward(&mut tape, &vs, &cs)?;
            let target: Array2<f64> = Array2::from_shape_fn((batch.len(), 1), |(i, _)| batch[i].reward);
            let neg_v = tape.scale(v, -1.0)?;
            let err = tape.add_const(neg_v, &target)?;
            let sq = tape.square(err)?;
            let vl = tape.mean(sq)?;
            let weighted_vl = tape.scale(vl, cfg.value_coef)?;
            let total = tape.add(pl, weighted_vl)?;
            let (pl_v, vl_v) = (tape.scalar(pl), tape.scalar(vl));
            if !(pl_v.is_finite() && vl_v.is_finite()) {
                return Err(Error::numeric(format!("alignment loss in iteration {iteration}")));
            }
            for &r in tape.value(ratio).column(0) {
                clipped += usize::from(is_clipped(r, cfg.clip_eps));
                stats.ratios.push(r);
            }
            tape.backward(total, &mut [&mut policy.store, &mut critic.store])?;
            pg_sum += clip_grad_norm(&mut policy.store, cfg.grad_clip);
            cg_sum += clip_grad_norm(&mut critic.store, cfg.grad_clip);
            cfg.policy_opt.step(&mut policy.store)?;
            cfg.critic_opt.step(&mut critic.store)?;
            pl_sum += pl_v;
            vl_sum += vl_v;
            stats.updates += 1;
        }
    }
    if stats.updates > 0 {
        let u = stats.updates as f64;
        stats.policy_loss = pl_sum / u;
        stats.value_loss = vl_sum / u;
        stats.policy_grad_norm = pg_sum / u;
        stats.critic_grad_norm = cg_sum / u;
        stats.clip_fraction = clipped as f64 / stats.ratios.len() as f64;
        stats.mean_ratio = stats.ratios.iter().sum::<f64>() / stats.ratios.len() as f64;
    }
    Ok(stats)
}

/// Supervised denoising fine-tuning on clean `(v, c)` pairs, without reward.
///
/// Fails when the tail loss ends above five times the initial loss.
pub fn sft_pretrain(
    policy: &mut FlowPolicy,
    data: &[(Vec<f64>, Vec<f64>)],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    seed_value: u64,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::Input("supervised fine-tuning needs at least one rollout".into()));
    }
    let log = train_denoiser(policy, data, schedule, cfg, seed_value)?;
    let window = (log.losses.len() / 10).clamp(1, 50);
    let head = log.losses[..window.min(log.losses.len())].iter().sum::<f64>() / window as f64;
    let tail = log.tail_mean(window);
    if !tail.is_finite() || (tail > 5.0 * head && !log.losses.is_empty()) {
        return Err(Error::numeric(format!(
            "supervised fine-tuning diverged: loss {head:.4} at the start, {tail:.4} at the end"
        )));
    }
    Ok(log)
}

/// `(flattened frames, condition features)` pairs of rollouts.
pub fn trajectory_pairs(trajs: &[Trajectory]) -> Vec<(Vec<f64>, Vec<f64>)> {
    trajs.iter().map(|t| (t.data().to_vec(), t.condition.features())).collect()
}

/// A trajectory policy whose encoder is fitted to `trajs`: residuals to the
/// initial frame carried by the condition features, standardized and
/// projected on `latent_dim` principal directions.
pub fn trajectory_policy(trajs: &[Trajectory], latent_dim: usize, hidden: Vec<usize>, init_seed: u64) -> Result<FlowPolicy> {
    let first = trajs
        .first()
        .ok_or_else(|| Error::Input("no rollouts to fit the policy encoder".into()))?;
    let data = trajectory_pairs(trajs);
    let normalizer = Normalizer::fit_projected(&data, first.frame_dim(), 1e-3, latent_dim)?;
    FlowPolicy::new(FlowArch::new(data[0].1.len(), hidden, normalizer), init_seed)
}

/// A critic for the rollouts of `trajs`, with input scaling fitted to them.
pub fn trajectory_critic(trajs: &[Trajectory], init_seed: u64) -> Result<Critic> {
    let first = trajs
        .first()
        .ok_or_else(|| Error::Input("no rollouts to fit the critic".into()))?;
    let samples: Vec<&[f64]> = trajs.iter().map(|t| t.data()).collect();
    let arch = CriticArch::fit(first.n_frames(), first.frame_dim(), first.condition.features().len(), &samples)?;
    Critic::new(arch, init_seed)
}
