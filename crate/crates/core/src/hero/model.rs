use std::collections::HashMap;

use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Checkpoint, MlpSpec, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::microworld::{Dim, Trajectory};
use crate::prefdata::AnnotatedVideo;
use crate::seed;

use super::features::{raw_features, FeatureScaler};

const ARCH_KIND: &str = "hero";

/// Shape of the hierarchical encoder and its heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeroArch {
    pub kind: String,
    pub n_frames: usize,
    pub feature_dim: usize,
    /// Output width of each trunk block; the trunk depth is its length.
    pub trunk: Vec<usize>,
    /// 1-based block index read by each head, in [`Dim`] order.
    pub taps: [usize; 4],
    /// Consecutive frame groups averaged separately at every tap.
    pub segments: usize,
    pub head_hidden: usize,
    /// Combination weights of the total reward.
    pub weights: [f64; 4],
    pub gripper_radius: f64,
    pub scaler: FeatureScaler,
}

impl HeroArch {
    /// Default layout: eight tapering blocks, taps at 2, 4, 6, 8 for
    /// phys, embod, task, vis.
    pub fn new(n_frames: usize, gripper_radius: f64, scaler: FeatureScaler) -> Self {
        HeroArch {
            kind: ARCH_KIND.into(),
            n_frames,
            feature_dim: scaler.mean.len(),
            trunk: vec![64, 64, 56, 56, 48, 48, 40, 40],
            taps: [2, 4, 6, 8],
            segments: 4,
            head_hidden: 32,
            weights: [0.25; 4],
            gripper_radius,
            scaler,
        }
    }

    /// Every head reads the final block.
    pub fn final_layer_only(mut self) -> Self {
        let last = self.trunk.len();
        self.taps = [last; 4];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != ARCH_KIND {
            return Err(Error::Format(format!("checkpoint holds a `{}`, not a reward model", self.kind)));
        }
        let depth = self.trunk.len();
        let [p, e, t, v] = self.taps;
        let ordered = (1 <= p && p <= e && e <= t && t <= v && v <= depth) && (v == depth);
        if !ordered {
            return Err(Error::Config(format!("taps {:?} must be ordered within depth {depth}", self.taps)));
        }
        if self.segments == 0 || self.n_frames % self.segments != 0 {
            return Err(Error::Config(format!(
                "{} frames cannot be split into {} segments",
                self.n_frames, self.segments
            )));
        }
        if self.weights.iter().any(|w| *w < 0.0) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("reward weights {:?} must be non-negative and sum to 1", self.weights)));
        }
        if self.feature_dim != self.scaler.scale.len() || self.trunk.iter().any(|w| *w == 0) {
            return Err(Error::Config("inconsistent reward model widths".into()));
        }
        Ok(())
    }

    /// True when the taps are strictly increasing, as in the full model.
    pub fn is_hierarchical(&self) -> bool {
        self.taps.windows(2).all(|w| w[0] < w[1])
    }
}

/// The four head outputs and their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reward4 {
    pub heads: [f64; 4],
    pub total: f64,
}

impl Reward4 {
    pub fn get(&self, k: Dim) -> f64 {
        self.heads[k.index()]
    }
}

/// Recorded head outputs of a batch of rollouts, each `n×1`.
pub struct HeadVars {
    pub heads: [Var; 4],
    pub total: Var,
}

/// Hierarchical encoder with four tap-connected heads.
#[derive(Debug, Clone)]
pub struct Hero {
    pub arch: HeroArch,
    pub store: ParamStore,
    heads: Vec<MlpSpec>,
}

fn block_w(l: usize) -> String {
    format!("hero.trunk.l{l}.w")
}

fn block_b(l: usize) -> String {
    format!("hero.trunk.l{l}.b")
}

impl Hero {
    pub fn new(arch: HeroArch, init_seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(init_seed, &[seed::stream::HERO_INIT]);
        let mut store = ParamStore::new();
        let mut fan_in = arch.feature_dim;
        for (l, &w) in arch.trunk.iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            store.insert(block_w(l), Array2::from_shape_fn((fan_in, w), |_| rng.gen_range(-bound..bound)));
            store.insert(block_b(l), Array2::from_shape_fn((1, w), |_| rng.gen_range(-bound..bound)));
            fan_in = w;
        }
        let heads: Vec<MlpSpec> = Dim::ALL
            .iter()
            .zip(arch.taps)
            .map(|(k, tap)| {
                MlpSpec::new(
                    format!("hero.head.{}", k.name()),
                    vec![arch.segments * arch.trunk[tap - 1], arch.head_hidden, 1],
                )
            })
            .collect();
        for h in &heads {
            h.init(&mut store, &mut rng);
        }
        Ok(Hero { arch, store, heads })
    }

    pub fn head_spec(&self, k: Dim) -> &MlpSpec {
        &self.heads[k.index()]
    }

    pub fn checkpoint(&self, global_step: u64) -> Result<Checkpoint> {
        Checkpoint::new(&self.arch, global_step, self.store.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch: HeroArch = ck.arch_as()?;
        let mut model = Hero::new(arch, 0)?;
        for name in model.store.names() {
            if ck.store.get(name)?.dim() != model.store.get(name)?.dim() {
                return Err(Error::Format(format!("checkpoint tensor `{name}` has the wrong shape")));
            }
        }
        model.store = ck.store.clone();
        Ok(model)
    }

    /// Scaled per-frame features of one rollout (`n_frames × feature_dim`).
    pub fn features(&self, traj: &Trajectory) -> Result<Tensor> {
        if traj.n_frames() != self.arch.n_frames {
            return Err(Error::Contract(format!(
                "reward model expects {} frames, rollout has {}",
                self.arch.n_frames,
                traj.n_frames()
            )));
        }
        self.arch.scaler.apply(&raw_features(traj, self.arch.gripper_radius))
    }

    /// Records the heads for rollouts whose scaled features are stacked in
    /// `x` (`n·n_frames` rows).
    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<HeadVars> {
        let t = self.arch.n_frames;
        if x.ncols() != self.arch.feature_dim || x.nrows() % t != 0 || x.nrows() == 0 {
            return Err(Error::Contract(format!(
                "reward model input must be a multiple of {t} rows of width {}",
                self.arch.feature_dim
            )));
        }
        let n = x.nrows() / t;
        let seg = self.arch.segments;
        let mut h = tape.constant(x.clone())?;
        let mut pooled: HashMap<usize, Var> = HashMap::new();
        for l in 0..self.arch.trunk.len() {
            let w = tape.param(&self.store, &block_w(l))?;
            let b = tape.param(&self.store, &block_b(l))?;
            let a = tape.affine(h, w, b)?;
            h = tape.silu(a)?;
            if self.arch.taps.contains(&(l + 1)) {
                let means = tape.segment_mean(h, t / seg)?;
                let parts = (0..seg)
                    .map(|s| tape.gather_rows(means, &(0..n).map(|i| i * seg + s).collect::<Vec<_>>()))
                    .collect::<Result<Vec<_>>>()?;
                pooled.insert(l + 1, tape.concat_cols(&parts)?);
            }
        }
        let mut heads = Vec::with_capacity(4);
        for (spec, tap) in self.heads.iter().zip(self.arch.taps) {
            let (out, _) = spec.forward(tape, &self.store, pooled[&tap])?;
            heads.push(out);
        }
        let mut total: Option<Var> = None;
        for (&hv, &w) in heads.iter().zip(&self.arch.weights) {
            let term = tape.scale(hv, w)?;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok(HeadVars {
            heads: [heads[0], heads[1], heads[2], heads[3]],
            total: total.expect("four heads"),
        })
    }

    /// Head outputs and total reward for stacked scaled features.
    pub fn score_features(&self, x: &Tensor) -> Result<Vec<Reward4>> {
        let mut tape = Tape::new();
        let hv = self.forward(&mut tape, x)?;
        let n = x.nrows() / self.arch.n_frames;
        Ok((0..n)
            .map(|i| Reward4 {
                heads: hv.heads.map(|v| tape.value(v)[[i, 0]]),
                total: tape.value(hv.total)[[i, 0]],
            })
            .collect())
    }

    /// `(R_phys, R_embod, R_task, R_vis, R_total)` of one rollout.
    pub fn score_4d(&self, traj: &Trajectory) -> Result<Reward4> {
        Ok(self.score_features(&self.features(traj)?)?[0])
    }

    /// Scores many rollouts in chunks.
    pub fn score_batch(&self, trajs: &[&Trajectory]) -> Result<Vec<Reward4>> {
        let mut out = Vec::with_capacity(trajs.len());
        for chunk in trajs.chunks(64) {
            let feats = chunk.iter().map(|t| self.features(t)).collect::<Result<Vec<_>>>()?;
            let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
            out.extend(self.score_features(&concatenate(Axis(0), &views).expect("equal widths"))?);
        }
        Ok(out)
    }
}

/// Precomputed scaled features and oracle scores of annotated rollouts.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    index: HashMap<u64, usize>,
    pub ids: Vec<u64>,
    pub features: Vec<Tensor>,
    pub scores: Vec<[f64; 4]>,
}

impl FeatureBank {
    pub fn build(model: &Hero, videos: &[AnnotatedVideo]) -> Result<Self> {
        let mut bank = FeatureBank {
            index: HashMap::new(),
            ids: Vec::new(),
            features: Vec::new(),
            scores: Vec::new(),
        };
        for v in videos {
            if bank.index.insert(v.id, bank.ids.len()).is_some() {
                return Err(Error::Input(format!("duplicate rollout id {}", v.id)));
            }
            bank.ids.push(v.id);
            bank.features.push(model.features(&v.traj)?);
            bank.scores.push(v.score.as_array());
        }
        Ok(bank)
    }

    pub fn position(&self, id: u64) -> Result<usize> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Input(format!("rollout {id} is not in the feature bank")))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Stacks the features of the rollouts at `positions`.
    pub fn stack(&self, positions: &[usize]) -> Tensor {
        let views: Vec<_> = positions.iter().map(|&p| self.features[p].view()).collect();
        concatenate(Axis(0), &views).expect("equal widths")
    }

    /// Scores every rollout of the bank.
    pub fn score_all(&self, model: &Hero) -> Result<Vec<Reward4>> {
        let all: Vec<usize> = (0..self.len()).collect();
        let mut out = Vec::with_capacity(self.len());
        for chunk in all.chunks(64) {
            out.extend(model.score_features(&self.stack(chunk))?);
        }
        Ok(out)
    }
}
