//! End-to-end stages behind the command line.
//!
//! Every stage reads and writes one run directory:
//!
//! ```text
//! config.toml     resolved configuration of the last command
//! log.jsonl       one JSON object per event
//! data/           clean rollouts, annotated pool, pair manifest and splits
//! models/         sft.ckpt, hero.ckpt, aligned.ckpt
//! rm/             reward-model dataset, metrics and loss curve
//! align/          iteration stats, curves and resumable state
//! eval/           benchmark suite and reports
//! proxy/          loss-proxy study
//! ```
//!
//! Condition ids of the different rollout sources live in disjoint ranges,
//! all below the benchmark's `id_offset`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bench::{compare, evaluate, BenchReport, BenchSuite, ComparisonSummary};
use crate::config::RunConfig;
use crate::diffcore::Checkpoint;
use crate::error::{Error, Result};
use crate::flowgen::{run_proxy_study, FlowPolicy, ProxyStudyReport};
use crate::fpo::{
    policy_rollouts, sft_pretrain, train_iteration, trajectory_pairs, trajectory_policy, Critic, CriticArch,
    IterationStats, Prompt,
};
use crate::fsutil;
use crate::hero::{
    evaluate_model, pair_decisions_csv, raw_features, train_hero, FeatureBank, FeatureScaler, Hero, HeroConfig,
    HeroTrainLog, Reward4, RmEvalReport,
};
use crate::microworld::{
    oracle_score, random_condition, read_trajectories, simulate, trajectories_from_bytes, trajectories_to_bytes,
    write_trajectories, Condition, TaskKind, Trajectory, WorldConfig,
};
use crate::prefdata::{annotate, build_pairs, split, AnnotatedVideo, DatasetManifest, PreferencePair, VideoEntry};
use crate::seed;

pub const SFT_ID_BASE: u64 = 0;
pub const POOL_ID_BASE: u64 = 1 << 32;
pub const GENERATED_ID_BASE: u64 = 2 << 32;
pub const ALIGN_ID_BASE: u64 = 3 << 32;
const ID_RANGE: u64 = 1 << 32;

const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn sft_rollouts(&self) -> PathBuf {
        self.path("data/sft.rwts")
    }

    pub fn manifest(&self) -> PathBuf {
        self.path("data/manifest.json")
    }

    pub fn sft_checkpoint(&self) -> PathBuf {
        self.path("models/sft.ckpt")
    }

    pub fn hero_checkpoint(&self) -> PathBuf {
        self.path("models/hero.ckpt")
    }

    pub fn aligned_checkpoint(&self) -> PathBuf {
        self.path("models/aligned.ckpt")
    }

    pub fn report(&self, label: &str) -> PathBuf {
        self.path(&format!("eval/{label}.json"))
    }

    /// Fails with a configuration error naming `what` when `path` is absent.
    fn require(&self, path: &Path, what: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::Config(format!("missing {what}: {} does not exist", path.display())))
        }
    }
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!(
                    "{} is locked by another command; remove {} if no command is running",
                    dir.display(),
                    path.display()
                ))
            } else {
                Error::io(&path, e)
            }
        })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Appends one JSON object per event to `log.jsonl` and echoes a terse line.
fn event(dir: &RunDir, stage: &str, name: &str, fields: serde_json::Value) -> Result<()> {
    let mut obj = serde_json::Map::new();
    obj.insert("stage".into(), stage.into());
    obj.insert("event".into(), name.into());
    if let serde_json::Value::Object(m) = &fields {
        obj.extend(m.clone());
    }
    append_line(&dir.path("log.jsonl"), &serde_json::to_string(&obj)?)?;
    log::info!("{stage}: {name} {fields}");
    Ok(())
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fsutil::write_atomic(path, text.as_bytes())
}

/// Creates the run directory and records the resolved configuration.
pub fn prepare(cfg: &RunConfig) -> Result<RunDir> {
    cfg.validate()?;
    let dir = RunDir::new(&cfg.out_dir);
    fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e))?;
    write_text(&dir.path("config.toml"), &cfg.to_toml()?)?;
    Ok(dir)
}

/// The condition of id `id`, with tasks cycling by `index`.
pub fn condition(cfg: &RunConfig, id: u64, index: usize) -> Condition {
    let mut rng = seed::rng(cfg.seed, &[seed::stream::CONDITIONS, id]);
    random_condition(&mut rng, id, Some(TaskKind::ALL[index % TaskKind::ALL.len()]), &cfg.world)
}

/// Prompts of alignment iteration `iteration`.
pub fn align_prompts(cfg: &RunConfig, iteration: u64) -> Vec<Prompt> {
    let n = cfg.fpo.rollouts_per_iter as u64;
    (0..n)
        .map(|i| Prompt::from_condition(&condition(cfg, ALIGN_ID_BASE + iteration * n + i, i as usize)))
        .collect()
}

/// Every condition id a run trains on.
pub fn training_ids(cfg: &RunConfig) -> BTreeSet<u64> {
    let n_align = (cfg.fpo.iterations * cfg.fpo.rollouts_per_iter) as u64;
    (0..cfg.sft.n_rollouts as u64)
        .map(|i| SFT_ID_BASE + i)
        .chain((0..cfg.pool.n_videos as u64).map(|i| POOL_ID_BASE + i))
        .chain((0..cfg.reward_data.policy_samples as u64).map(|i| GENERATED_ID_BASE + i))
        .chain((0..n_align).map(|i| ALIGN_ID_BASE + i))
        .collect()
}

fn check_id_ranges(cfg: &RunConfig) -> Result<()> {
    let n_align = (cfg.fpo.iterations * cfg.fpo.rollouts_per_iter) as u64;
    let sizes = [
        cfg.sft.n_rollouts as u64,
        cfg.pool.n_videos as u64,
        cfg.reward_data.policy_samples as u64,
        n_align,
    ];
    if sizes.iter().any(|&n| n >= ID_RANGE) || cfg.bench.id_offset < ALIGN_ID_BASE + ID_RANGE {
        return Err(Error::Config(format!(
            "condition id ranges overlap: sources of sizes {sizes:?}, benchmark offset {}",
            cfg.bench.id_offset
        )));
    }
    Ok(())
}

/// Rounds rollouts through their on-disk precision so that every stage sees
/// the values it would read back.
fn quantize(trajs: Vec<Trajectory>) -> Result<Vec<Trajectory>> {
    trajectories_from_bytes(&trajectories_to_bytes(&trajs)?)
}

/// Clean rollouts for policy pretraining.
pub fn clean_rollouts(cfg: &RunConfig) -> Result<Vec<Trajectory>> {
    (0..cfg.sft.n_rollouts)
        .map(|i| {
            let id = SFT_ID_BASE + i as u64;
            let c = condition(cfg, id, i);
            simulate(&c, cfg.pool.horizon, seed::derive(cfg.seed, &[seed::stream::SIMULATE, id]), &cfg.world)
        })
        .collect()
}

fn annotations_csv(videos: &[AnnotatedVideo]) -> String {
    let mut out = String::from("id,condition,task,provenance,s_phys,s_embod,s_task,s_vis\n");
    for v in videos {
        let s = v.score.as_array();
        let prov = serde_json::to_string(&v.traj.provenance).unwrap_or_default().replace(',', ";");
        let _ = writeln!(
            out,
            "{},{},{:?},{},{},{},{},{}",
            v.id, v.traj.condition.id, v.traj.condition.task, prov, s[0], s[1], s[2], s[3]
        );
    }
    out
}

fn entries(videos: &[AnnotatedVideo], path: &str, first_record: u64) -> Vec<VideoEntry> {
    videos
        .iter()
        .map(|v| VideoEntry {
            id: v.id,
            path: path.into(),
            record: (v.id - first_record) as usize,
            score: v.score,
        })
        .collect()
}

/// Splits `manifest` and writes the three parts under `dir`. An empty pair
/// set yields three empty parts.
fn write_splits(cfg: &RunConfig, manifest: &DatasetManifest, dir: &Path) -> Result<[DatasetManifest; 3]> {
    let parts = if manifest.pairs.is_empty() {
        let mut empty = manifest.clone();
        empty.videos.clear();
        [empty.clone(), empty.clone(), empty]
    } else {
        split(manifest, cfg.split.fractions, cfg.seed)?
    };
    for (part, name) in parts.iter().zip(SPLIT_NAMES) {
        part.save(&dir.join(format!("{name}.json")))?;
    }
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub n_clean: usize,
    pub n_videos: usize,
    pub n_pairs: usize,
    /// Pairs per dimension, in `(phys, embod, task, vis)` order.
    pub counts: [usize; 4],
    pub split_pairs: [usize; 3],
    pub warnings: Vec<String>,
}

/// Simulates the clean pretraining rollouts and the corrupted pool,
/// annotates the pool, and writes pairs and splits.
pub fn gen_data(cfg: &RunConfig) -> Result<GenDataSummary> {
    let dir = prepare(cfg)?;
    check_id_ranges(cfg)?;
    let mirror = cfg.output.json_mirror;
    let clean = quantize(clean_rollouts(cfg)?)?;
    write_trajectories(&dir.sft_rollouts(), &clean, mirror)?;
    let pool = quantize(crate::prefdata::generate_pool(&cfg.pool, &cfg.world, cfg.seed, POOL_ID_BASE)?)?;
    write_trajectories(&dir.path("data/pool.rwts"), &pool, mirror)?;
    let videos = annotate(pool, &cfg.world, &cfg.oracle)?;
    write_text(&dir.path("data/annotations.csv"), &annotations_csv(&videos))?;
    let pairs = build_pairs(&videos, &cfg.pref)?;
    let manifest = DatasetManifest::new(pairs, entries(&videos, "pool.rwts", 0), &cfg.pref, cfg.seed);
    manifest.save(&dir.manifest())?;
    let mut warnings = Vec::new();
    if manifest.pairs.is_empty() {
        warnings.push(format!(
            "no pair passes the thresholds (tau {}, eps_iso {}); the dataset is empty",
            cfg.pref.tau, cfg.pref.eps_iso
        ));
    }
    let parts = write_splits(cfg, &manifest, &dir.path("data"))?;
    let summary = GenDataSummary {
        n_clean: clean.len(),
        n_videos: videos.len(),
        n_pairs: manifest.pairs.len(),
        counts: manifest.counts,
        split_pairs: parts.each_ref().map(|p| p.pairs.len()),
        warnings,
    };
    for w in &summary.warnings {
        log::warn!("gen-data: {w}");
    }
    event(&dir, "gen-data", "done", serde_json::to_value(&summary)?)?;
    Ok(summary)
}

/// Loads the trajectories behind the entries of `manifest`, which lives in `base`.
pub fn load_videos(base: &Path, manifest: &DatasetManifest) -> Result<Vec<AnnotatedVideo>> {
    let mut streams: HashMap<String, Vec<Trajectory>> = HashMap::new();
    let mut out = Vec::with_capacity(manifest.videos.len());
    for v in &manifest.videos {
        if !streams.contains_key(&v.path) {
            streams.insert(v.path.clone(), read_trajectories(&base.join(&v.path))?);
        }
        let traj = streams[&v.path]
            .get(v.record)
            .ok_or_else(|| Error::Format(format!("{} has no record {}", v.path, v.record)))?
            .clone();
        out.push(AnnotatedVideo {
            id: v.id,
            traj,
            score: v.score,
        });
    }
    Ok(out)
}

/// `ck` as it reads back from disk.
fn stored(ck: Checkpoint) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&ck.to_bytes()?)
}

fn load_policy(path: &Path) -> Result<FlowPolicy> {
    FlowPolicy::from_checkpoint(&Checkpoint::load(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Supervised denoising pretraining on the clean rollouts.
pub fn sft(cfg: &RunConfig) -> Result<SftSummary> {
    let dir = prepare(cfg)?;
    dir.require(&dir.sft_rollouts(), "clean rollouts (run gen-data first)")?;
    let trajs = read_trajectories(&dir.sft_rollouts())?;
    let mut policy = trajectory_policy(&trajs, cfg.sft.latent_dim, cfg.sft.hidden.clone(), cfg.seed)?;
    let log = sft_pretrain(&mut policy, &trajectory_pairs(&trajs), &cfg.schedule, &cfg.sft.train, cfg.seed)?;
    policy.checkpoint(cfg.sft.train.steps as u64)?.save(&dir.sft_checkpoint())?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in log.losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    write_text(&dir.path("models/sft_loss.csv"), &csv)?;
    let window = (log.losses.len() / 10).clamp(1, 100);
    let summary = SftSummary {
        steps: log.losses.len(),
        initial_loss: log.losses.iter().take(window).sum::<f64>() / window.min(log.losses.len()).max(1) as f64,
        final_loss: log.tail_mean(window),
    };
    event(&dir, "sft", "done", serde_json::to_value(&summary)?)?;
    Ok(summary)
}

/// A reward model fitted on `train` pairs over `videos`.
pub fn fit_reward_model(
    videos: &[AnnotatedVideo],
    train: &[PreferencePair],
    cfg: &HeroConfig,
    world: &WorldConfig,
    seed_value: u64,
) -> Result<(Hero, FeatureBank, HeroTrainLog)> {
    let first = videos
        .first()
        .ok_or_else(|| Error::Config("reward model training needs annotated rollouts".into()))?;
    let train_ids: BTreeSet<u64> = train.iter().flat_map(|p| [p.id_a, p.id_b]).collect();
    let feats: Vec<_> = videos
        .iter()
        .filter(|v| train_ids.contains(&v.id))
        .map(|v| raw_features(&v.traj, world.gripper_radius))
        .collect();
    let scaler = FeatureScaler::fit(&feats)?;
    let mut hero = Hero::new(cfg.arch(first.traj.n_frames(), world.gripper_radius, scaler), seed_value)?;
    let bank = FeatureBank::build(&hero, videos)?;
    let log = train_hero(&mut hero, &bank, train, cfg, seed_value)?;
    Ok((hero, bank, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmMetrics {
    pub beta: f64,
    pub hierarchical: bool,
    pub n_videos: usize,
    pub n_policy_samples: usize,
    pub split_pairs: [usize; 3],
    pub initial_loss: f64,
    pub final_loss: f64,
    pub validation: Option<RmEvalReport>,
    pub test: RmEvalReport,
}

/// Adds annotated policy samples to the pool, rebuilds and splits the
/// pairs, trains the reward model and evaluates it on the test split.
pub fn train_rm(cfg: &RunConfig) -> Result<RmMetrics> {
    let dir = prepare(cfg)?;
    check_id_ranges(cfg)?;
    dir.require(&dir.manifest(), "preference dataset (run gen-data first)")?;
    let manifest = DatasetManifest::load(&dir.manifest())?;
    let mut videos = load_videos(&dir.path("data"), &manifest)?;
    let mut entries_all: Vec<VideoEntry> = manifest
        .videos
        .iter()
        .map(|v| VideoEntry {
            path: format!("../data/{}", v.path),
            ..v.clone()
        })
        .collect();
    let mut n_generated = 0;
    if cfg.reward_data.policy_samples > 0 {
        dir.require(&dir.sft_checkpoint(), "pretrained policy checkpoint (run sft first)")?;
        let policy = load_policy(&dir.sft_checkpoint())?;
        let conds: Vec<Condition> = (0..cfg.reward_data.policy_samples)
            .map(|i| condition(cfg, GENERATED_ID_BASE + i as u64, i))
            .collect();
        let samples = quantize(policy_rollouts(&policy, &conds, &cfg.schedule, cfg.reward_data.sample_steps, cfg.seed)?)?;
        write_trajectories(&dir.path("rm/policy_samples.rwts"), &samples, cfg.output.json_mirror)?;
        let first = videos.iter().map(|v| v.id + 1).max().unwrap_or(0);
        let generated = samples
            .into_iter()
            .enumerate()
            .map(|(j, traj)| {
                let score = oracle_score(&traj, &cfg.world, &cfg.oracle)?;
                Ok(AnnotatedVideo {
                    id: first + j as u64,
                    traj,
                    score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        n_generated = generated.len();
        write_text(&dir.path("rm/policy_annotations.csv"), &annotations_csv(&generated))?;
        entries_all.extend(entries(&generated, "policy_samples.rwts", first));
        videos.extend(generated);
    }
    let pairs = build_pairs(&videos, &cfg.pref)?;
    let rm_manifest = DatasetManifest::new(pairs, entries_all, &cfg.pref, cfg.seed);
    rm_manifest.save(&dir.path("rm/manifest.json"))?;
    if rm_manifest.pairs.is_empty() {
        return Err(Error::Config("no preference pairs to train the reward model on".into()));
    }
    let [train, val, test] = write_splits(cfg, &rm_manifest, &dir.path("rm"))?;
    let (hero, bank, log) = fit_reward_model(&videos, &train.pairs, &cfg.hero, &cfg.world, cfg.seed)?;
    hero.checkpoint(cfg.hero.train.steps as u64)?.save(&dir.hero_checkpoint())?;
    let mut csv = String::from("step,total,dimensional,overall\n");
    for (i, p) in log.steps.iter().enumerate() {
        let _ = writeln!(csv, "{i},{},{},{}", p.total, p.dimensional, p.overall);
    }
    write_text(&dir.path("rm/loss.csv"), &csv)?;
    let rewards: HashMap<u64, Reward4> = bank.ids.iter().copied().zip(bank.score_all(&hero)?).collect();
    write_text(&dir.path("rm/test_decisions.csv"), &pair_decisions_csv(&rewards, &test.pairs)?)?;
    let window = (log.steps.len() / 10).clamp(1, 50);
    let n = log.steps.len();
    let metrics = RmMetrics {
        beta: cfg.hero.beta,
        hierarchical: cfg.hero.hierarchical,
        n_videos: videos.len(),
        n_policy_samples: n_generated,
        split_pairs: [train.pairs.len(), val.pairs.len(), test.pairs.len()],
        initial_loss: log.mean_total(0..window.min(n)),
        final_loss: log.mean_total(n.saturating_sub(window)..n),
        validation: if val.pairs.is_empty() {
            None
        } else {
            Some(evaluate_model(&hero, &bank, &val.pairs)?)
        },
        test: evaluate_model(&hero, &bank, &test.pairs)?,
    };
    fsutil::write_json(&dir.path("rm/metrics.json"), &metrics)?;
    event(
        &dir,
        "train-rm",
        "done",
        json!({
            "beta": metrics.beta,
            "initial_loss": metrics.initial_loss,
            "final_loss": metrics.final_loss,
            "dimension_accuracy": metrics.test.dimension_accuracy,
            "overall_accuracy": metrics.test.overall.accuracy,
        }),
    )?;
    Ok(metrics)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct AlignState {
    next_iteration: u64,
    base_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignSummary {
    pub start_iteration: u64,
    pub iterations: u64,
    /// Mean reward of every logged iteration, in order.
    pub mean_rewards: Vec<f64>,
}

fn read_stats(path: &Path) -> Result<Vec<IterationStats>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn curves_csv(stats: &[IterationStats]) -> String {
    let mut out = String::from(
        "iteration,n_records,skipped,mean_reward,r_phys,r_embod,r_task,r_vis,mean_raw_advantage,clip_fraction,mean_ratio,policy_loss,value_loss,policy_grad_norm,critic_grad_norm\n",
    );
    for s in stats {
        let h = s.mean_heads;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.iteration,
            s.n_records,
            s.skipped,
            s.mean_reward,
            h[0],
            h[1],
            h[2],
            h[3],
            s.mean_raw_advantage,
            s.clip_fraction,
            s.mean_ratio,
            s.policy_loss,
            s.value_loss,
            s.policy_grad_norm,
            s.critic_grad_norm
        );
    }
    out
}

fn new_critic(cfg: &RunConfig, trajs: &[Trajectory]) -> Result<Critic> {
    let first = trajs
        .first()
        .ok_or_else(|| Error::Input("no rollouts to fit the critic".into()))?;
    let samples: Vec<&[f64]> = trajs.iter().map(|t| t.data()).collect();
    let mut arch = CriticArch::fit(first.n_frames(), first.frame_dim(), first.condition.features().len(), &samples)?;
    arch.use_condition = cfg.align.critic_uses_condition;
    Critic::new(arch, cfg.seed)
}

/// Reward-driven fine-tuning of the pretrained policy.
///
/// With `resume`, continues from the last saved iteration; the stats log is
/// cut back to that iteration so it stays contiguous.
pub fn align(cfg: &RunConfig, resume: bool) -> Result<AlignSummary> {
    let dir = prepare(cfg)?;
    check_id_ranges(cfg)?;
    dir.require(&dir.sft_checkpoint(), "pretrained policy checkpoint (run sft first)")?;
    dir.require(&dir.hero_checkpoint(), "reward model checkpoint (run train-rm first)")?;
    let stats_path = dir.path("align/stats.jsonl");
    let state_path = dir.path("align/state.json");
    let total = cfg.fpo.iterations as u64;

    if total == 0 && !resume {
        fsutil::write_atomic(&dir.aligned_checkpoint(), &fsutil::read(&dir.sft_checkpoint())?)?;
        write_text(&stats_path, "")?;
        write_text(&dir.path("align/curves.csv"), &curves_csv(&[]))?;
        event(&dir, "align", "done", json!({ "iterations": 0 }))?;
        return Ok(AlignSummary {
            start_iteration: 0,
            iterations: 0,
            mean_rewards: Vec::new(),
        });
    }

    let hero = Hero::from_checkpoint(&Checkpoint::load(&dir.hero_checkpoint())?)?;
    let resumed = resume && state_path.exists();
    let (mut policy, mut critic, state) = if resumed {
        let state: AlignState = fsutil::read_json(&state_path)?;
        let policy = load_policy(&dir.path("align/policy.ckpt"))?;
        let critic = Critic::from_checkpoint(&Checkpoint::load(&dir.path("align/critic.ckpt"))?)?;
        (policy, critic, state)
    } else {
        if resume {
            log::warn!("align: nothing to resume in {}, starting over", dir.root.display());
        }
        let ck = Checkpoint::load(&dir.sft_checkpoint())?;
        let mut policy = FlowPolicy::from_checkpoint(&ck)?;
        if cfg.align.reset_optimizer {
            policy.store.reset_optimizer_state();
        }
        let critic = new_critic(cfg, &read_trajectories(&dir.sft_rollouts())?)?;
        let state = AlignState {
            next_iteration: 0,
            base_step: ck.global_step,
        };
        (policy, critic, state)
    };
    let kept: Vec<IterationStats> = read_stats(&stats_path)?
        .into_iter()
        .filter(|s| s.iteration < state.next_iteration)
        .collect();
    let mut lines = String::new();
    for s in &kept {
        lines.push_str(&serde_json::to_string(s)?);
        lines.push('\n');
    }
    write_text(&stats_path, &lines)?;
    event(
        &dir,
        "align",
        "start",
        json!({ "from_iteration": state.next_iteration, "iterations": total, "resumed": resumed }),
    )?;

    let save = |policy: &FlowPolicy, critic: &Critic, next: u64| -> Result<()> {
        policy.checkpoint(state.base_step + next)?.save(&dir.path("align/policy.ckpt"))?;
        critic.checkpoint(next)?.save(&dir.path("align/critic.ckpt"))?;
        fsutil::write_json(
            &state_path,
            &AlignState {
                next_iteration: next,
                base_step: state.base_step,
            },
        )
    };
    for it in state.next_iteration..total {
        let prompts = align_prompts(cfg, it);
        let stats = train_iteration(&mut policy, &mut critic, &hero, &prompts, &cfg.schedule, &cfg.fpo, it, cfg.seed)?;
        // Continue from checkpoint precision so that a resumed run matches an uninterrupted one.
        policy = FlowPolicy::from_checkpoint(&stored(policy.checkpoint(0)?)?)?;
        critic = Critic::from_checkpoint(&stored(critic.checkpoint(0)?)?)?;
        append_line(&stats_path, &serde_json::to_string(&stats)?)?;
        event(
            &dir,
            "align",
            "iteration",
            json!({
                "iteration": it,
                "mean_reward": stats.mean_reward,
                "clip_fraction": stats.clip_fraction,
                "mean_ratio": stats.mean_ratio,
                "value_loss": stats.value_loss,
            }),
        )?;
        if (it + 1) % cfg.align.checkpoint_every as u64 == 0 || it + 1 == total {
            save(&policy, &critic, it + 1)?;
        }
    }
    policy
        .checkpoint(state.base_step + total.max(state.next_iteration))?
        .save(&dir.aligned_checkpoint())?;
    let all = read_stats(&stats_path)?;
    write_text(&dir.path("align/curves.csv"), &curves_csv(&all))?;
    let summary = AlignSummary {
        start_iteration: state.next_iteration,
        iterations: all.len() as u64,
        mean_rewards: all.iter().map(|s| s.mean_reward).collect(),
    };
    event(&dir, "align", "done", json!({ "iterations": summary.iterations }))?;
    Ok(summary)
}

/// The benchmark suite of a run, checked against its training conditions.
pub fn bench_suite(cfg: &RunConfig) -> Result<BenchSuite> {
    check_id_ranges(cfg)?;
    let suite = BenchSuite::generate(&cfg.bench, &cfg.world, cfg.seed)?;
    suite.check_disjoint(&training_ids(cfg))?;
    Ok(suite)
}

/// Benchmarks the policy in `checkpoint` and writes `eval/<label>.json` and `.csv`.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, label: &str) -> Result<BenchReport> {
    let dir = prepare(cfg)?;
    if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(Error::Config(format!("report label `{label}` must be alphanumeric")));
    }
    dir.require(checkpoint, "policy checkpoint")?;
    let policy = load_policy(checkpoint)?;
    let suite = bench_suite(cfg)?;
    let cond_dim = suite.conditions[0].features().len();
    if policy.arch.cond_dim != cond_dim {
        return Err(Error::Contract(format!(
            "checkpoint conditions on {} features, the suite provides {cond_dim}",
            policy.arch.cond_dim
        )));
    }
    let suite_ref = json!({
        "id": suite.id,
        "seed": suite.seed,
        "rollouts_per_condition": suite.rollouts_per_condition,
        "sample_steps": suite.sample_steps,
        "condition_ids": suite.conditions.iter().map(|c| c.id).collect::<Vec<_>>(),
    });
    fsutil::write_json(&dir.path("eval/suite.json"), &suite_ref)?;
    let report = evaluate(&policy, &suite, &cfg.schedule, &cfg.world, &cfg.oracle, label)?;
    fsutil::write_json(&dir.report(label), &report)?;
    write_text(
        &dir.path(&format!("eval/{label}.csv")),
        &format!("{}\n{}\n", BenchReport::CSV_HEADER, report.csv_row()),
    )?;
    let mut per = String::from("id,task,n_rollouts,s6_phys,s6_embod,s6_task,s6_vis\n");
    for c in &report.per_condition {
        let s = c.mean_s6;
        let _ = writeln!(per, "{},{:?},{},{},{},{},{}", c.id, c.task, c.n_rollouts, s[0], s[1], s[2], s[3]);
    }
    write_text(&dir.path(&format!("eval/{label}_conditions.csv")), &per)?;
    event(
        &dir,
        "eval",
        "done",
        json!({ "label": label, "s10": report.s10, "s_o": report.s_o, "skipped": report.skipped }),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub report: BenchReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
    /// Every later row on the first row's suite, against the first row.
    pub comparisons: Vec<ComparisonSummary>,
    pub csv: String,
    pub markdown: String,
}

/// Merges the benchmark reports of `runs` into one table.
pub fn report(runs: &[PathBuf], seed_value: u64) -> Result<ReportTable> {
    let mut rows = Vec::new();
    for run in runs {
        let eval_dir = run.join("eval");
        let listing = fs::read_dir(&eval_dir)
            .map_err(|e| Error::Config(format!("no benchmark reports in {}: {e}", eval_dir.display())))?;
        let mut paths: Vec<PathBuf> = listing
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_stem().is_some_and(|s| s != "suite"))
            .collect();
        // The pretrained baseline leads each run, the rest follow by name.
        paths.sort_by_key(|p| (p.file_stem().is_none_or(|s| s != "sft"), p.clone()));
        for p in paths {
            rows.push(ReportRow {
                run: run.display().to_string(),
                report: fsutil::read_json(&p)?,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Config("no benchmark reports found".into()));
    }
    let mut comparisons = Vec::new();
    for r in &rows[1..] {
        if r.report.suite_id == rows[0].report.suite_id {
            comparisons.push(compare(&rows[0].report, &r.report, seed_value)?);
        }
    }
    let mut csv = format!("run,{}\n", BenchReport::CSV_HEADER);
    let mut md = String::from("| run | model | S_phys | S_embod | S_task | S_vis | S_O |\n|---|---|---|---|---|---|---|\n");
    for r in &rows {
        let s = r.report.s10;
        let _ = writeln!(csv, "{},{}", r.run, r.report.csv_row());
        let _ = writeln!(
            md,
            "| {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.1} |",
            r.run, r.report.label, s[0], s[1], s[2], s[3], r.report.s_o
        );
    }
    if !comparisons.is_empty() {
        md.push_str("\n| comparison | dS_phys | dS_embod | dS_task | dS_vis | dS_O | confidence (S_O) |\n|---|---|---|---|---|---|---|\n");
        for c in &comparisons {
            let d = c.delta_s10;
            let _ = writeln!(
                md,
                "| {} vs {} | {:+.2} | {:+.2} | {:+.2} | {:+.2} | {:+.2} | {:?} |",
                c.label_b, c.label_a, d[0], d[1], d[2], d[3], c.delta_s_o, c.confidence[4]
            );
        }
    }
    Ok(ReportTable {
        rows,
        comparisons,
        csv,
        markdown: md,
    })
}

/// Runs the loss-proxy study and writes its report and scatter data.
pub fn validate_proxy(cfg: &RunConfig) -> Result<ProxyStudyReport> {
    let dir = prepare(cfg)?;
    let report = run_proxy_study(&cfg.proxy_study, cfg.seed)?;
    fsutil::write_json(&dir.path("proxy/report.json"), &report)?;
    let mut csv = String::from("proxy_loglik,exact_loglik,true_logpdf\n");
    for ((p, e), t) in report.proxy.iter().zip(&report.exact).zip(&report.true_logpdf) {
        let _ = writeln!(csv, "{p},{e},{t}");
    }
    write_text(&dir.path("proxy/scatter.csv"), &csv)?;
    event(
        &dir,
        "validate-proxy",
        "done",
        json!({ "spearman": report.spearman, "kendall": report.kendall, "n_points": report.n_points }),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub data: GenDataSummary,
    pub sft: SftSummary,
    pub reward_model: RmMetrics,
    pub align: AlignSummary,
    pub sft_report: BenchReport,
    pub aligned_report: BenchReport,
    pub comparison: ComparisonSummary,
}

/// Every stage in order: data, pretraining, reward model, benchmark of the
/// pretrained policy, alignment, benchmark of the aligned policy.
pub fn run_all(cfg: &RunConfig) -> Result<RunSummary> {
    let dir = prepare(cfg)?;
    let data = gen_data(cfg)?;
    let sft_summary = sft(cfg)?;
    let reward_model = train_rm(cfg)?;
    let sft_report = eval(cfg, &dir.sft_checkpoint(), "sft")?;
    let align_summary = align(cfg, false)?;
    let aligned_report = eval(cfg, &dir.aligned_checkpoint(), "aligned")?;
    let comparison = compare(&sft_report, &aligned_report, cfg.seed)?;
    let summary = RunSummary {
        data,
        sft: sft_summary,
        reward_model,
        align: align_summary,
        sft_report,
        aligned_report,
        comparison,
    };
    fsutil::write_json(&dir.path("summary.json"), &summary)?;
    let mut by_dim = BTreeMap::new();
    for (k, name) in ["phys", "embod", "task", "vis"].iter().enumerate() {
        by_dim.insert(*name, summary.comparison.delta_s10[k]);
    }
    event(
        &dir,
        "run",
        "done",
        json!({
            "sft_s_o": summary.sft_report.s_o,
            "aligned_s_o": summary.aligned_report.s_o,
            "delta_s10": by_dim,
        }),
    )?;
    Ok(summary)
}
