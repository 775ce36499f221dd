use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Checkpoint, MlpSpec, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;

const ARCH_KIND: &str = "critic";

/// Shape of the value network.
///
/// A sample of `n_frames × frame_dim` values is unfolded over a temporal
/// window, passed frame by frame through a stack of dense layers, averaged
/// over time and, optionally joined with the condition features, mapped to
/// one scalar by a two-layer head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticArch {
    pub kind: String,
    pub n_frames: usize,
    pub frame_dim: usize,
    pub cond_dim: usize,
    /// Odd temporal window of the first layer.
    pub window: usize,
    pub frame_hidden: Vec<usize>,
    pub head_hidden: usize,
    pub use_condition: bool,
    pub frame_mean: Vec<f64>,
    /// Zero marks a constant input column, which is fed as zero.
    pub frame_scale: Vec<f64>,
}

impl CriticArch {
    /// Four frame layers of width 64 over a window of three frames, then a
    /// two-layer head; input scaling fitted on `samples`.
    pub fn fit(n_frames: usize, frame_dim: usize, cond_dim: usize, samples: &[&[f64]]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("cannot fit the critic input scaling to no samples".into()));
        }
        let mut sum = vec![0.0; frame_dim];
        let mut sq = vec![0.0; frame_dim];
        for s in samples {
            if s.len() != n_frames * frame_dim {
                return Err(Error::Contract(format!(
                    "critic sample has {} values, expected {n_frames}x{frame_dim}",
                    s.len()
                )));
            }
            for frame in s.chunks(frame_dim) {
                for (j, x) in frame.iter().enumerate() {
                    sum[j] += x;
                    sq[j] += x * x;
                }
            }
        }
        let count = (samples.len() * n_frames) as f64;
        let frame_mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let frame_scale = sq
            .iter()
            .zip(&frame_mean)
            .map(|(s, m)| {
                let sd = (s / count - m * m).max(0.0).sqrt();
                if sd > 1e-9 {
                    sd
                } else {
                    0.0
                }
            })
            .collect();
        Ok(CriticArch {
            kind: ARCH_KIND.into(),
            n_frames,
            frame_dim,
            cond_dim,
            window: 3,
            frame_hidden: vec![64; 4],
            head_hidden: 64,
            use_condition: true,
            frame_mean,
            frame_scale,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != ARCH_KIND {
            return Err(Error::Format(format!("checkpoint holds a `{}`, not a critic", self.kind)));
        }
        let ok = self.n_frames > 0
            && self.frame_dim > 0
            && self.window % 2 == 1
            && !self.frame_hidden.is_empty()
            && self.head_hidden > 0
            && self.frame_mean.len() == self.frame_dim
            && self.frame_scale.len() == self.frame_dim;
        if !ok {
            return Err(Error::Config("inconsistent critic architecture".into()));
        }
        Ok(())
    }

    fn head_input(&self) -> usize {
        self.frame_hidden.last().copied().unwrap_or(0) + if self.use_condition { self.cond_dim } else { 0 }
    }
}

/// Value network `V_ψ(v, c)`.
#[derive(Debug, Clone)]
pub struct Critic {
    pub arch: CriticArch,
    pub store: ParamStore,
    frame_net: MlpSpec,
    head: MlpSpec,
}

impl Critic {
    pub fn new(arch: CriticArch, init_seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut widths = vec![arch.window * arch.frame_dim];
        widths.extend(&arch.frame_hidden);
        let frame_net = MlpSpec::new("critic.frame", widths);
        let head = MlpSpec::new("critic.head", vec![arch.head_input(), arch.head_hidden, 1]);
        let mut store = ParamStore::new();
        let mut rng = seed::rng(init_seed, &[seed::stream::CRITIC_INIT]);
        frame_net.init(&mut store, &mut rng);
        head.init(&mut store, &mut rng);
        Ok(Critic {
            arch,
            store,
            frame_net,
            head,
        })
    }

    pub fn head_spec(&self) -> &MlpSpec {
        &self.head
    }

    pub fn checkpoint(&self, global_step: u64) -> Result<Checkpoint> {
        Checkpoint::new(&self.arch, global_step, self.store.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch: CriticArch = ck.arch_as()?;
        let mut critic = Critic::new(arch, 0)?;
        for name in critic.store.names() {
            if ck.store.get(name)?.dim() != critic.store.get(name)?.dim() {
                return Err(Error::Format(format!("checkpoint tensor `{name}` has the wrong shape")));
            }
        }
        critic.store = ck.store.clone();
        Ok(critic)
    }

    /// Scaled, window-unfolded frames of every sample, `(n·n_frames) × (window·frame_dim)`.
    fn unfold(&self, samples: &[&[f64]]) -> Result<Tensor> {
        let (t_len, d, w) = (self.arch.n_frames, self.arch.frame_dim, self.arch.window);
        let half = (w / 2) as isize;
        let mut out = Array2::zeros((samples.len() * t_len, w * d));
        for (i, s) in samples.iter().enumerate() {
            if s.len() != t_len * d {
                return Err(Error::Contract(format!(
                    "critic expects {t_len}x{d} values per sample, got {}",
                    s.len()
                )));
            }
            for t in 0..t_len {
                let mut row = out.row_mut(i * t_len + t);
                for k in 0..w {
                    let src = (t as isize + k as isize - half).clamp(0, t_len as isize - 1) as usize;
                    for j in 0..d {
                        let scale = self.arch.frame_scale[j];
                        row[k * d + j] = if scale > 0.0 {
                            (s[src * d + j] - self.arch.frame_mean[j]) / scale
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
        Ok(out)
    }

    /// Records `V` for a batch of samples and their condition features (`n×1`).
    pub fn forward(&self, tape: &mut Tape, samples: &[&[f64]], conds: &[&[f64]]) -> Result<Var> {
        if samples.is_empty() || samples.len() != conds.len() {
            return Err(Error::Contract("critic needs one condition per sample".into()));
        }
        if conds.iter().any(|c| c.len() != self.arch.cond_dim) {
            return Err(Error::Contract(format!("critic expects {} condition features", self.arch.cond_dim)));
        }
        let x = tape.constant(self.unfold(samples)?)?;
        let (h, _) = self.frame_net.forward(tape, &self.store, x)?;
        let h = tape.silu(h)?;
        let pooled = tape.segment_mean(h, self.arch.n_frames)?;
        let input = if self.arch.use_condition {
            let c = Array2::from_shape_fn((conds.len(), self.arch.cond_dim), |(i, j)| conds[i][j]);
            let c = tape.constant(c)?;
            tape.concat_cols(&[pooled, c])?
        } else {
            pooled
        };
        Ok(self.head.forward(tape, &self.store, input)?.0)
    }

    pub fn values(&self, samples: &[&[f64]], conds: &[&[f64]]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for (s, c) in samples.chunks(64).zip(conds.chunks(64)) {
            let mut tape = Tape::new();
            let v = self.forward(&mut tape, s, c)?;
            out.extend(tape.value(v).column(0).iter().copied());
        }
        Ok(out)
    }
}
