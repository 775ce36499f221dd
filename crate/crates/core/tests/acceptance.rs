//! Acceptance run: one `PASS`/`FAIL` line per criterion, with the measured values.
//!
//! A failing criterion is reported, not hidden. The process exits 0 either way
//! so that the workspace test suite stays usable; only a crash exits non-zero.
//! The five full pipeline runs of criterion 6 are cached under the cargo
//! temporary directory and reused while their configuration is unchanged.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reworld::bench::overall_score;
use reworld::config::RunConfig;
use reworld::diffcore::{AdamW, MlpSpec, ParamStore, Tape, Tensor, Var};
use reworld::flowgen::{cfm_loss, run_proxy_study, FlowArch, FlowPolicy, NoiseSchedule, Normalizer, ProxyStudyConfig, TrainConfig};
use reworld::fpo::{
    collect, policy_loss, ppo_ratio, ratio_from_losses, sft_pretrain, train_iteration, Critic, CriticArch, FpoConfig, Prompt,
    RewardModel,
};
use reworld::hero::{evaluate_model, HeroConfig};
use reworld::microworld::Dim;
use reworld::pipeline::{self, RunDir, RunSummary};
use reworld::prefdata::{AnnotatedVideo, DatasetManifest, PreferencePair};
use reworld::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn main() {
    let criteria: [(u8, &str, fn() -> Result<Outcome>); 8] = [
        (1, "overall score arithmetic", overall_score_arithmetic),
        (2, "likelihood proxy and ratio identity", proxy_and_ratio_identity),
        (3, "gradients against finite differences", gradient_checks),
        (4, "per-head isolated accuracy", isolated_accuracy),
        (5, "reward model ablations", ablations),
        (6, "alignment improves the benchmark", alignment_gain),
        (7, "clipped objective and ratio variance", clipping_and_variance),
        (8, "bitwise reproducibility", reproducibility),
    ];
    let mut passed = 0;
    for (id, name, check) in criteria {
        let start = std::time::Instant::now();
        let outcome = check().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        passed += outcome.pass as usize;
        println!(
            "criterion {id}: {} | {name} | {} ({:.0}s)",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {passed}/8 criteria pass");
}

fn overall_score_arithmetic() -> Result<Outcome> {
    // (phys, embod, task, vis) rows on the report scale with their reference totals.
    let rows = [([5.9, 5.6, 6.5, 7.3], 61.9), ([5.1, 4.2, 6.1, 7.2], 54.4), ([10.0; 4], 100.0)];
    let worst = rows
        .iter()
        .map(|(s, want)| (overall_score(*s) - want).abs())
        .fold(0.0, f64::max);
    Ok(Outcome::new(worst < 1e-9, format!("largest deviation {worst:.2e} over {} rows", rows.len())))
}

struct ConstantReward;

impl RewardModel for ConstantReward {
    fn score(&self, _prompts: &[&Prompt], samples: &[&[f64]]) -> Result<Vec<[f64; 4]>> {
        Ok(vec![[1.0; 4]; samples.len()])
    }
}

/// `[r, 0, 0, 0]` with `r = −(x − target)²` on the first coordinate.
struct Quadratic {
    target: f64,
}

impl RewardModel for Quadratic {
    fn score(&self, _prompts: &[&Prompt], samples: &[&[f64]]) -> Result<Vec<[f64; 4]>> {
        Ok(samples.iter().map(|s| [-(s[0] - self.target).powi(2), 0.0, 0.0, 0.0]).collect())
    }
}

fn prompts(n: u64) -> Vec<Prompt> {
    (0..n)
        .map(|id| Prompt {
            id,
            features: vec![0.0],
            condition: None,
        })
        .collect()
}

/// A scalar flow policy fitted to `N(mean, 1)` and a small critic.
fn scalar_setup(mean: f64, steps: usize, seed_value: u64) -> Result<(FlowPolicy, Critic, Vec<(Vec<f64>, Vec<f64>)>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    let data: Vec<(Vec<f64>, Vec<f64>)> = (0..512)
        .map(|_| (vec![mean + rng.sample::<f64, _>(rand_distr::StandardNormal)], vec![0.0]))
        .collect();
    let mut policy = FlowPolicy::new(FlowArch::new(1, vec![32, 32], Normalizer::identity(1)), seed_value)?;
    let train = TrainConfig {
        steps,
        batch_size: 64,
        optimizer: AdamW::with_lr(3e-3),
        ..TrainConfig::default()
    };
    sft_pretrain(&mut policy, &data, &NoiseSchedule::default(), &train, seed_value)?;
    let samples: Vec<&[f64]> = data.iter().map(|(v, _)| &v[..]).collect();
    let mut arch = CriticArch::fit(1, 1, 1, &samples)?;
    arch.frame_hidden = vec![16, 16];
    arch.head_hidden = 16;
    Ok((policy, Critic::new(arch, seed_value)?, data))
}

fn small_fpo() -> FpoConfig {
    FpoConfig {
        rollouts_per_iter: 64,
        batch_size: 16,
        sample_steps: 8,
        ..FpoConfig::default()
    }
}

fn proxy_and_ratio_identity() -> Result<Outcome> {
    let study = run_proxy_study(&ProxyStudyConfig::default(), 1)?;
    let (policy, critic, _) = scalar_setup(0.0, 200, 2)?;
    let schedule = NoiseSchedule::default();
    let cfg = small_fpo();
    let buffer = collect(&policy, &ConstantReward, &critic, &prompts(64), &schedule, &cfg, 0, 2)?;
    let mut off_one = 0;
    for rec in &buffer.records {
        if ppo_ratio(&policy, rec, &schedule, &cfg)? != 1.0 {
            off_one += 1;
        }
    }
    let pass = study.spearman >= 0.8 && off_one == 0 && !buffer.records.is_empty();
    Ok(Outcome::new(
        pass,
        format!(
            "Spearman {:.3} (Kendall {:.3}) over {} points with {} draws; ratio at the collecting policy != 1 for {off_one} of {} records",
            study.spearman,
            study.kendall,
            study.n_points,
            study.n_draws,
            buffer.records.len()
        ),
    ))
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

/// Largest relative error between tape and central-difference gradients.
fn gradient_error(store: &ParamStore, build: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>) -> Result<f64> {
    let mut analytic = store.clone();
    let mut tape = Tape::new();
    let loss = build(&mut tape, &analytic)?;
    tape.backward(loss, &mut [&mut analytic])?;
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(&mut t, p)?;
        Ok(t.scalar(l))
    };
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let base = store.get(&name)?;
        let mut numeric = Array2::zeros(base.dim());
        for ((r, c), g) in numeric.indexed_iter_mut() {
            let mut plus = store.clone();
            plus.get_mut(&name)?[[r, c]] += h;
            let mut minus = store.clone();
            minus.get_mut(&name)?[[r, c]] -= h;
            *g = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        }
        let a = analytic.grad(&name)?;
        let norm = |t: &Tensor| t.mapv(|x| x * x).sum().sqrt();
        let diff = norm(&(a - &numeric));
        let scale = norm(a).max(norm(&numeric));
        worst = worst.max(if scale < 1e-8 { diff } else { diff / scale });
    }
    Ok(worst)
}

/// A loss that touches every tape operation.
fn kitchen_sink(tape: &mut Tape, s: &ParamStore) -> Result<Var> {
    let x = tape.param(s, "x")?;
    let w = tape.param(s, "w")?;
    let b = tape.param(s, "b")?;
    let c = tape.param(s, "c")?;
    let m = tape.param(s, "m")?;
    let bias = tape.param(s, "bias")?;
    let h = tape.affine(x, w, b)?; // 6×4
    let h = tape.silu(h)?;
    let h = tape.matmul(h, m)?; // 6×4
    let h = tape.add_bias(h, bias)?;
    let k = tape.constant(Array2::from_elem((6, 4), 0.3))?;
    let h2 = tape.mul(h, k)?;
    let h3 = tape.add(h, h2)?;
    let h4 = tape.sub(h3, h)?;
    let h5 = tape.add_const(h4, &Array2::from_elem((6, 4), 0.1))?;
    let h6 = tape.row_scale(h5, &[1.0, -2.0, 0.5, 3.0, 0.25, 1.5])?;
    let seg = tape.segment_mean(h6, 2)?; // 3×4
    let g = tape.gather_rows(seg, &[2, 0, 2, 1])?; // 4×4
    let cat = tape.concat_cols(&[g, c])?; // 4×6
    let sl = tape.slice_cols(cat, 1, 5)?; // 4×4
    let sq = tape.square(sl)?;
    let rows = tape.sum_rows(sq)?; // 4×1
    let sp = tape.softplus(rows)?;
    let half = tape.scale(sp, -0.5)?;
    let ex = tape.exp(half)?;
    let clipped = tape.clamp(ex, 0.2, 0.6)?;
    let mn = tape.min(ex, clipped)?;
    let mean = tape.mean(mn)?;
    let tot = tape.sum(rows)?;
    let tot = tape.scale(tot, 0.01)?;
    tape.add(mean, tot)
}

fn gradient_checks() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for i in 0..25 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let mut store = ParamStore::new();
        store.insert("x", rand_matrix(&mut rng, 6, 3));
        store.insert("w", rand_matrix(&mut rng, 3, 4));
        store.insert("b", rand_matrix(&mut rng, 1, 4));
        store.insert("c", rand_matrix(&mut rng, 4, 2));
        store.insert("m", rand_matrix(&mut rng, 4, 4));
        store.insert("bias", rand_matrix(&mut rng, 1, 4));
        worst = worst.max(gradient_error(&store, &kitchen_sink)?);
        instances += 1;
    }
    let spec = MlpSpec::new("net", vec![4, 6, 5, 2]);
    for i in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + i);
        let mut store = ParamStore::new();
        spec.init(&mut store, &mut rng);
        let x = rand_matrix(&mut rng, 5, 4);
        let target = rand_matrix(&mut rng, 5, 2);
        let build = |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
            let xv = tape.constant(x.clone())?;
            let (y, _) = spec.forward(tape, s, xv)?;
            let t = tape.constant(target.clone())?;
            let d = tape.sub(y, t)?;
            let sq = tape.square(d)?;
            tape.mean(sq)
        };
        worst = worst.max(gradient_error(&store, &build)?);
        instances += 1;
    }
    Ok(Outcome::new(
        worst < 1e-3,
        format!("largest relative error {worst:.2e} over {instances} random instances"),
    ))
}

/// Static preference data of the default configuration for `seed_value`.
struct StaticData {
    videos: Vec<AnnotatedVideo>,
    train: Vec<PreferencePair>,
    test: Vec<PreferencePair>,
    _dir: tempfile::TempDir,
}

fn static_data(seed_value: u64) -> Result<(RunConfig, StaticData)> {
    let tmp = tempfile::tempdir().map_err(|e| reworld::Error::io("tempdir", e))?;
    let mut cfg = RunConfig::default();
    cfg.seed = seed_value;
    cfg.out_dir = tmp.path().join("run");
    cfg.output.json_mirror = false;
    pipeline::gen_data(&cfg)?;
    let data = RunDir::new(&cfg.out_dir).path("data");
    let manifest = DatasetManifest::load(&data.join("manifest.json"))?;
    let videos = pipeline::load_videos(&data, &manifest)?;
    let train = DatasetManifest::load(&data.join("train.json"))?.pairs;
    let test = DatasetManifest::load(&data.join("test.json"))?.pairs;
    Ok((
        cfg,
        StaticData {
            videos,
            train,
            test,
            _dir: tmp,
        },
    ))
}

fn isolated_accuracy() -> Result<Outcome> {
    let (cfg, data) = static_data(1)?;
    let (hero, bank, _) = pipeline::fit_reward_model(&data.videos, &data.train, &cfg.hero, &cfg.world, cfg.seed)?;
    let report = evaluate_model(&hero, &bank, &data.test)?;
    let per_head: Vec<String> = Dim::ALL
        .iter()
        .map(|&k| {
            let h = report.head(k);
            format!("{} {:.3} (n={})", k.name(), h.isolated_accuracy, h.n_isolated)
        })
        .collect();
    let pass = data.train.len() >= 5000 && Dim::ALL.iter().all(|&k| report.head(k).isolated_accuracy >= 0.85);
    Ok(Outcome::new(
        pass,
        format!("{} training pairs; isolated test accuracy {}", data.train.len(), per_head.join(", ")),
    ))
}

fn ablations() -> Result<Outcome> {
    const STEPS: usize = 300;
    let mut consistent = 0;
    let mut lines = Vec::new();
    for s in 1..=5u64 {
        let (cfg, data) = static_data(s)?;
        let variant = |beta: f64, hierarchical: bool| -> Result<f64> {
            let mut hero_cfg = HeroConfig {
                beta,
                hierarchical,
                ..cfg.hero.clone()
            };
            hero_cfg.train.steps = STEPS;
            let (hero, bank, _) = pipeline::fit_reward_model(&data.videos, &data.train, &hero_cfg, &cfg.world, s)?;
            Ok(evaluate_model(&hero, &bank, &data.test)?.dimension_accuracy)
        };
        let full = variant(cfg.hero.beta, true)?;
        let drop_ld = full - variant(0.0, true)?;
        let drop_lo = full - variant(1.0, true)?;
        let drop_flat = full - variant(cfg.hero.beta, false)?;
        let ok = drop_ld > 0.0 && drop_ld > drop_lo && drop_flat > 0.0;
        consistent += ok as usize;
        lines.push(format!(
            "seed {s}: full {full:.3}, -L_D {drop_ld:+.3}, -L_O {drop_lo:+.3}, -hier {drop_flat:+.3}"
        ));
    }
    Ok(Outcome::new(
        consistent >= 4,
        format!("{consistent}/5 seeds with the expected signs and ordering [{}]", lines.join("; ")),
    ))
}

/// Configuration of the alignment runs: the defaults, with a pool whose
/// corruptions emphasize physics defects.
fn alignment_config(seed_value: u64, root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed_value;
    cfg.out_dir = root.join(format!("seed{seed_value}"));
    cfg.pool.kind_weights = [2.0, 2.0, 2.0, 1.0, 1.0, 1.0];
    cfg.output.json_mirror = false;
    cfg
}

/// The summary of a finished run whose configuration matches `cfg`, or a fresh run.
fn cached_run(cfg: &RunConfig) -> Result<RunSummary> {
    let dir = RunDir::new(&cfg.out_dir);
    let stored = std::fs::read_to_string(dir.path("config.toml")).ok();
    let summary = std::fs::read(dir.path("summary.json")).ok();
    if let (Some(stored), Some(summary)) = (stored, summary) {
        if stored == cfg.to_toml()? {
            if let Ok(s) = serde_json::from_slice(&summary) {
                return Ok(s);
            }
        }
    }
    if cfg.out_dir.exists() {
        std::fs::remove_dir_all(&cfg.out_dir).map_err(|e| reworld::Error::io(&cfg.out_dir, e))?;
    }
    pipeline::run_all(cfg)
}

fn alignment_gain() -> Result<Outcome> {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-alignment");
    let mut rel = Vec::new();
    let mut phys_up = 0;
    let mut lines = Vec::new();
    for s in 1..=5u64 {
        let cfg = alignment_config(s, &root);
        let run = cached_run(&cfg)?;
        let gain = (run.aligned_report.s_o - run.sft_report.s_o) / run.sft_report.s_o;
        let d_phys = run.aligned_report.s10[0] - run.sft_report.s10[0];
        phys_up += (d_phys > 0.0) as usize;
        rel.push(gain);
        lines.push(format!(
            "seed {s}: S_O {:.2} -> {:.2} ({:+.1}%), S_phys {d_phys:+.3}",
            run.sft_report.s_o,
            run.aligned_report.s_o,
            100.0 * gain
        ));
    }
    let mean = rel.iter().sum::<f64>() / rel.len() as f64;
    let iterations = RunConfig::default().fpo.iterations;
    let pass = iterations >= 20 && mean >= 0.10 && phys_up >= 4;
    Ok(Outcome::new(
        pass,
        format!(
            "{iterations} iterations; mean relative S_O change {:+.1}%, S_phys up in {phys_up}/5 [{}]",
            100.0 * mean,
            lines.join("; ")
        ),
    ))
}

fn clipping_and_variance() -> Result<Outcome> {
    let eps = 0.2;
    // Hand enumeration of the clipped surrogate, branch by branch.
    let mut grid_errors = 0;
    let mut grid = 0;
    for a in [-2.0, -0.5, 0.0, 0.5, 2.0] {
        for r in [0.3, 0.79, 0.8, 0.95, 1.0, 1.05, 1.2, 1.21, 2.5] {
            let want = if a > 0.0 {
                if r > 1.0 + eps {
                    -(1.0 + eps) * a
                } else {
                    -r * a
                }
            } else if a < 0.0 {
                if r < 1.0 - eps {
                    -(1.0 - eps) * a
                } else {
                    -r * a
                }
            } else {
                0.0
            };
            grid += 1;
            if (policy_loss(r, a, eps) - want).abs() > 1e-12 {
                grid_errors += 1;
            }
        }
    }

    // Reported clip fraction against a recount of the evaluated ratios.
    let (mut policy, mut critic, _) = scalar_setup(0.0, 300, 3)?;
    let cfg = FpoConfig {
        policy_opt: AdamW::with_lr(1e-2),
        ..small_fpo()
    };
    let schedule = NoiseSchedule::default();
    let mut recount_ok = true;
    let mut fractions = Vec::new();
    for it in 0..3 {
        let stats = train_iteration(&mut policy, &mut critic, &Quadratic { target: 2.0 }, &prompts(64), &schedule, &cfg, it, 3)?;
        let outside = stats.ratios.iter().filter(|&&r| r < 1.0 - eps || r > 1.0 + eps).count();
        let recount = outside as f64 / stats.ratios.len() as f64;
        recount_ok &= stats.ratios.len() == cfg.epochs * stats.n_records && (recount - stats.clip_fraction).abs() < 1e-12;
        fractions.push(stats.clip_fraction);
    }

    // Spread of single-draw and five-draw ratio estimates on one buffer.
    let (old, critic, _) = scalar_setup(0.0, 300, 4)?;
    let mut new = old.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shifted: Vec<(Vec<f64>, Vec<f64>)> = (0..256)
        .map(|_| (vec![0.5 + rng.sample::<f64, _>(rand_distr::StandardNormal)], vec![0.0]))
        .collect();
    let nudge = TrainConfig {
        steps: 40,
        batch_size: 64,
        optimizer: AdamW::with_lr(1e-3),
        ..TrainConfig::default()
    };
    sft_pretrain(&mut new, &shifted, &schedule, &nudge, 5)?;
    let buffer = collect(&old, &ConstantReward, &critic, &prompts(32), &schedule, &small_fpo(), 0, 4)?;
    let spread = |n: usize| -> Result<f64> {
        let mut total = 0.0;
        for rec in &buffer.records {
            let ratios = (0..200u64)
                .map(|key| {
                    let l_old = cfm_loss(&old, &rec.v, &rec.c, &schedule, n, key)?.value;
                    let l_new = cfm_loss(&new, &rec.v, &rec.c, &schedule, n, key)?.value;
                    Ok(ratio_from_losses(l_old, l_new))
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
            total += ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (ratios.len() - 1) as f64;
        }
        Ok(total / buffer.records.len() as f64)
    };
    let (var1, var5) = (spread(1)?, spread(5)?);
    let pass = grid_errors == 0 && recount_ok && var1 > var5;
    Ok(Outcome::new(
        pass,
        format!(
            "{grid_errors}/{grid} grid mismatches; clip fractions {fractions:.3?} {} the recount; ratio variance N=1 {var1:.3e} vs N=5 {var5:.3e}",
            if recount_ok { "match" } else { "differ from" }
        ),
    ))
}

fn tiny_config(out_dir: PathBuf) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_toml(
        r#"
seed = 7

[pool]
n_videos = 200

[sft]
n_rollouts = 100
latent_dim = 16
hidden = [64, 64]
train = { steps = 200 }

[reward_data]
policy_samples = 50
sample_steps = 8

[hero.train]
steps = 100

[fpo]
iterations = 3
rollouts_per_iter = 32
batch_size = 16
sample_steps = 8

[bench]
n_conditions = 10
rollouts_per_condition = 2
sample_steps = 8

[output]
json_mirror = false
"#,
        std::iter::empty(),
    )?;
    cfg.out_dir = out_dir;
    Ok(cfg)
}

fn reproducibility() -> Result<Outcome> {
    let tmp = tempfile::tempdir().map_err(|e| reworld::Error::io("tempdir", e))?;
    let a = tiny_config(tmp.path().join("a"))?;
    let b = tiny_config(tmp.path().join("b"))?;
    let ra = pipeline::run_all(&a)?;
    let rb = pipeline::run_all(&b)?;
    let read = |cfg: &RunConfig| std::fs::read(RunDir::new(&cfg.out_dir).aligned_checkpoint()).ok();
    let same_scores = ra.sft_report.s_o.to_bits() == rb.sft_report.s_o.to_bits()
        && ra.aligned_report.s_o.to_bits() == rb.aligned_report.s_o.to_bits();
    let same_weights = read(&a).is_some() && read(&a) == read(&b);
    Ok(Outcome::new(
        same_scores && same_weights,
        format!(
            "S_O {:.6} / {:.6} and {:.6} / {:.6}; aligned checkpoints {}",
            ra.sft_report.s_o,
            rb.sft_report.s_o,
            ra.aligned_report.s_o,
            rb.aligned_report.s_o,
            if same_weights { "byte-identical" } else { "differ" }
        ),
    ))
}
