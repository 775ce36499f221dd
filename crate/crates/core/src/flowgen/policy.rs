use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{clip_grad_norm, AdamW, Checkpoint, MlpSpec, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;

use super::{tile_row, Denoiser, NoiseDraws, NoiseSchedule};

const ARCH_KIND: &str = "flow_mlp";

/// Affine map between data and model coordinates.
///
/// With `anchor_dim > 0`, the first `anchor_dim` condition features are
/// tiled along the data vector and subtracted before standardizing; for
/// trajectories these are the initial frame. Coordinates whose residual is
/// constant in the fitting data (`scale == 0`) encode to zero and decode to
/// their fitted value exactly.
///
/// An optional basis then projects the standardized residual onto its
/// leading principal directions, whitened, so that the model works in a
/// lower-dimensional latent space. Decoding maps back through the same
/// directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
    pub anchor_dim: usize,
    /// Principal directions scaled by their standard deviation, one per latent coordinate.
    #[serde(default)]
    pub loadings: Vec<Vec<f64>>,
    /// Variance along each direction.
    #[serde(default)]
    pub variances: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            offset: vec![0.0; dim],
            scale: vec![1.0; dim],
            anchor_dim: 0,
            loadings: Vec::new(),
            variances: Vec::new(),
        }
    }

    /// Fits offsets and scales to `(v, cond)` pairs; scales below `min_scale`
    /// are raised to it unless the coordinate is exactly constant.
    pub fn fit(data: &[(Vec<f64>, Vec<f64>)], anchor_dim: usize, min_scale: f64) -> Result<Self> {
        let dim = data
            .first()
            .map(|(v, _)| v.len())
            .ok_or_else(|| Error::Input("cannot fit a normalizer to no data".into()))?;
        let mut norm = Normalizer {
            anchor_dim,
            ..Normalizer::identity(dim)
        };
        let residuals: Vec<Vec<f64>> = data
            .iter()
            .map(|(v, c)| {
                if v.len() != dim || c.len() < anchor_dim {
                    return Err(Error::Input("inconsistent normalizer data".into()));
                }
                Ok(v.iter().enumerate().map(|(i, x)| x - norm.anchor(c, i)).collect())
            })
            .collect::<Result<_>>()?;
        let n = residuals.len() as f64;
        for i in 0..dim {
            let first = residuals[0][i];
            let mean = residuals.iter().map(|r| r[i]).sum::<f64>() / n;
            let var = residuals.iter().map(|r| (r[i] - mean).powi(2)).sum::<f64>() / n;
            if residuals.iter().all(|r| r[i] == first) {
                norm.offset[i] = first;
                norm.scale[i] = 0.0;
            } else {
                norm.offset[i] = mean;
                norm.scale[i] = var.sqrt().max(min_scale);
            }
        }
        Ok(norm)
    }

    /// Like [`Normalizer::fit`], followed by a projection on the `latent_dim`
    /// leading principal directions of the standardized residuals.
    pub fn fit_projected(
        data: &[(Vec<f64>, Vec<f64>)],
        anchor_dim: usize,
        min_scale: f64,
        latent_dim: usize,
    ) -> Result<Self> {
        let mut norm = Self::fit(data, anchor_dim, min_scale)?;
        let dim = norm.scale.len();
        if latent_dim == 0 || latent_dim > dim {
            return Err(Error::Config(format!("latent width {latent_dim} must be in 1..={dim}")));
        }
        let n = data.len();
        let x = DMatrix::from_fn(n, dim, |i, j| norm.standardize(&data[i].0, &data[i].1, j));
        let cov = x.transpose() * &x / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]).then(a.cmp(b)));
        for &k in &order[..latent_dim] {
            let var = eig.eigenvalues[k];
            if !(var > 1e-12) {
                return Err(Error::Config(format!(
                    "data span fewer than {latent_dim} directions; lower the latent width"
                )));
            }
            let mut u: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            // sign convention: the largest entry is positive
            let pivot = u.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
            if pivot < 0.0 {
                u.iter_mut().for_each(|a| *a = -*a);
            }
            let sd = var.sqrt();
            norm.loadings.push(u.iter().map(|a| a * sd).collect());
            norm.variances.push(var);
        }
        Ok(norm)
    }

    fn anchor(&self, cond: &[f64], i: usize) -> f64 {
        if self.anchor_dim == 0 {
            0.0
        } else {
            cond[i % self.anchor_dim]
        }
    }

    fn standardize(&self, v: &[f64], cond: &[f64], i: usize) -> f64 {
        if self.scale[i] == 0.0 {
            0.0
        } else {
            (v[i] - self.anchor(cond, i) - self.offset[i]) / self.scale[i]
        }
    }

    pub fn is_projected(&self) -> bool {
        !self.loadings.is_empty()
    }

    /// Width of the model coordinates.
    pub fn latent_dim(&self) -> usize {
        if self.is_projected() {
            self.loadings.len()
        } else {
            self.scale.len()
        }
    }

    pub fn encode(&self, v: &[f64], cond: &[f64]) -> Vec<f64> {
        let r: Vec<f64> = (0..v.len()).map(|i| self.standardize(v, cond, i)).collect();
        if !self.is_projected() {
            return r;
        }
        self.loadings
            .iter()
            .zip(&self.variances)
            .map(|(l, var)| l.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / var)
            .collect()
    }

    pub fn decode(&self, z: &[f64], cond: &[f64]) -> Vec<f64> {
        let r: Vec<f64> = if self.is_projected() {
            let mut r = vec![0.0; self.scale.len()];
            for (zk, l) in z.iter().zip(&self.loadings) {
                for (ri, a) in r.iter_mut().zip(l) {
                    *ri += zk * a;
                }
            }
            r
        } else {
            z.to_vec()
        };
        r.iter()
            .enumerate()
            .map(|(i, x)| self.anchor(cond, i) + self.offset[i] + self.scale[i] * x)
            .collect()
    }

    /// `log |det ∂encode/∂v|` over the free coordinates, for an unprojected map.
    pub fn log_det(&self) -> f64 {
        self.scale.iter().filter(|s| **s > 0.0).map(|s| -s.ln()).sum()
    }
}

/// Architecture record stored with policy checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowArch {
    pub kind: String,
    pub data_dim: usize,
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    /// Data scale of the preconditioning, in model coordinates.
    pub sigma_data: f64,
    pub normalizer: Normalizer,
}

impl FlowArch {
    pub fn new(cond_dim: usize, hidden: Vec<usize>, normalizer: Normalizer) -> Self {
        FlowArch {
            kind: ARCH_KIND.into(),
            data_dim: normalizer.scale.len(),
            latent_dim: normalizer.latent_dim(),
            cond_dim,
            hidden,
            sigma_data: 1.0,
            normalizer,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kind != ARCH_KIND {
            return Err(Error::Format(format!("checkpoint holds a `{}`, not a flow policy", self.kind)));
        }
        if self.data_dim == 0
            || self.normalizer.scale.len() != self.data_dim
            || self.normalizer.offset.len() != self.data_dim
            || self.normalizer.latent_dim() != self.latent_dim
            || self.normalizer.loadings.len() != self.normalizer.variances.len()
            || self.normalizer.loadings.iter().any(|l| l.len() != self.data_dim)
            || self.normalizer.anchor_dim > self.cond_dim
            || !(self.sigma_data > 0.0)
        {
            return Err(Error::Config(format!(
                "inconsistent flow architecture (data {}, condition {}, anchor {})",
                self.data_dim, self.cond_dim, self.normalizer.anchor_dim
            )));
        }
        Ok(())
    }
}

/// Conditional denoiser `D(x, σ, c) = c_skip·x + c_out·F([c_in·x, c, c_noise])`
/// with a SiLU network `F`; the network input is `data_dim + cond_dim + 1` wide.
#[derive(Debug, Clone)]
pub struct FlowPolicy {
    pub arch: FlowArch,
    pub spec: MlpSpec,
    pub store: ParamStore,
}

impl FlowPolicy {
    pub fn new(arch: FlowArch, init_seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut widths = vec![arch.latent_dim + arch.cond_dim + 1];
        widths.extend(&arch.hidden);
        widths.push(arch.latent_dim);
        let spec = MlpSpec::new("policy.net", widths);
        let mut store = ParamStore::new();
        spec.init(&mut store, &mut seed::rng(init_seed, &[seed::stream::POLICY_INIT]));
        Ok(FlowPolicy { arch, spec, store })
    }

    pub fn checkpoint(&self, global_step: u64) -> Result<Checkpoint> {
        Checkpoint::new(&self.arch, global_step, self.store.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch: FlowArch = ck.arch_as()?;
        let mut policy = FlowPolicy::new(arch, 0)?;
        for name in policy.store.names() {
            if ck.store.get(name)?.dim() != policy.store.get(name)?.dim() {
                return Err(Error::Format(format!("checkpoint tensor `{name}` has the wrong shape")));
            }
        }
        policy.store = ck.store.clone();
        Ok(policy)
    }

    /// `(c_skip, c_out, c_in, c_noise)` at noise level `sigma`.
    pub fn preconditioning(&self, sigma: f64) -> [f64; 4] {
        let sd = self.arch.sigma_data;
        let tot = sigma * sigma + sd * sd;
        [sd * sd / tot, sigma * sd / tot.sqrt(), 1.0 / tot.sqrt(), sigma.ln() / 4.0]
    }

    fn net_input(&self, x: &Tensor, sigma: &[f64], cond: &Tensor) -> Result<Tensor> {
        let (d, c) = (self.arch.latent_dim, self.arch.cond_dim);
        if x.ncols() != d || cond.ncols() != c || x.nrows() != sigma.len() || cond.nrows() != sigma.len() {
            return Err(Error::Contract(format!(
                "denoiser expects data {d} and condition {c} per row, got {} and {} over {} levels",
                x.ncols(),
                cond.ncols(),
                sigma.len()
            )));
        }
        let mut input = Array2::zeros((x.nrows(), d + c + 1));
        for (r, &s) in sigma.iter().enumerate() {
            let [_, _, c_in, c_noise] = self.preconditioning(s);
            let mut row = input.row_mut(r);
            for j in 0..d {
                row[j] = c_in * x[[r, j]];
            }
            for j in 0..c {
                row[d + j] = cond[[r, j]];
            }
            row[d + c] = c_noise;
        }
        Ok(input)
    }

    /// Recorded per-row loss terms `w(σ)·‖D(z + σε) − z‖²` as an `r×1` node.
    pub fn terms_on_tape(
        &self,
        tape: &mut Tape,
        z: &Tensor,
        cond: &Tensor,
        draws: &NoiseDraws,
        schedule: &NoiseSchedule,
    ) -> Result<Var> {
        let sig = &draws.sigmas;
        if z.dim() != draws.eps.dim() {
            return Err(Error::Contract("noise draws do not match the data batch".into()));
        }
        let mut x = z.clone();
        for (mut row, (&s, e)) in x.axis_iter_mut(Axis(0)).zip(sig.iter().zip(draws.eps.axis_iter(Axis(0)))) {
            row.scaled_add(s, &e);
        }
        let input = tape.constant(self.net_input(&x, sig, cond)?)?;
        let (f, _) = self.spec.forward(tape, &self.store, input)?;
        let c_out: Vec<f64> = sig.iter().map(|&s| self.preconditioning(s)[1]).collect();
        let mut resid = x;
        for ((mut row, zr), &s) in resid.axis_iter_mut(Axis(0)).zip(z.axis_iter(Axis(0))).zip(sig) {
            row *= self.preconditioning(s)[0];
            row -= &zr;
        }
        let scaled = tape.row_scale(f, &c_out)?;
        let err = tape.add_const(scaled, &resid)?;
        let sq = tape.square(err)?;
        let per_row = tape.sum_rows(sq)?;
        let w: Vec<f64> = sig.iter().map(|&s| schedule.weight(s)).collect();
        tape.row_scale(per_row, &w)
    }

    /// Recorded denoising loss of one sample, averaged over its draws (1×1).
    pub fn record_loss_on_tape(
        &self,
        tape: &mut Tape,
        z: &[f64],
        cond: &[f64],
        draws: &NoiseDraws,
        schedule: &NoiseSchedule,
    ) -> Result<Var> {
        let n = draws.sigmas.len();
        let terms = self.terms_on_tape(tape, &tile_row(z, n), &tile_row(cond, n), draws, schedule)?;
        tape.mean(terms)
    }
}

impl Denoiser for FlowPolicy {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn cond_dim(&self) -> usize {
        self.arch.cond_dim
    }

    fn denoise(&self, x: &Tensor, sigma: &[f64], cond: &Tensor) -> Result<Tensor> {
        let f = self.spec.eval(&self.store, &self.net_input(x, sigma, cond)?)?;
        let mut out = f;
        for ((mut row, xr), &s) in out.axis_iter_mut(Axis(0)).zip(x.axis_iter(Axis(0))).zip(sigma) {
            let [c_skip, c_out, _, _] = self.preconditioning(s);
            row *= c_out;
            row.scaled_add(c_skip, &xr);
        }
        Ok(out)
    }

    fn encode(&self, v: &[f64], cond: &[f64]) -> Vec<f64> {
        self.arch.normalizer.encode(v, cond)
    }

    fn decode(&self, z: &[f64], cond: &[f64]) -> Vec<f64> {
        self.arch.normalizer.decode(z, cond)
    }

    fn log_det_encode(&self) -> f64 {
        self.arch.normalizer.log_det()
    }

    /// Evaluated through the same recorded path as the training loss, so a
    /// loss computed here and one recorded for a gradient agree bit for bit.
    fn cfm_terms(&self, z: &[f64], cond: &[f64], draws: &NoiseDraws, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let n = draws.sigmas.len();
        let terms = self.terms_on_tape(&mut tape, &tile_row(z, n), &tile_row(cond, n), draws, schedule)?;
        Ok(tape.value(terms).column(0).to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
    pub grad_clip: f64,
    /// The learning rate follows a cosine decay down to this fraction.
    pub final_lr_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 64,
            optimizer: AdamW::with_lr(1e-3),
            grad_clip: 1.0,
            final_lr_frac: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || !(self.grad_clip > 0.0) || !(0.0..=1.0).contains(&self.final_lr_frac) {
            return Err(Error::Config(format!("invalid training settings {self:?}")));
        }
        Ok(())
    }

    pub(crate) fn lr_at(&self, step: usize) -> f64 {
        let progress = step as f64 / self.steps.max(1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.optimizer.lr * (self.final_lr_frac + (1.0 - self.final_lr_frac) * cos)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Trains `policy` on `(v, cond)` pairs in data coordinates by minimizing
/// the denoising loss with one fresh `(σ, ε)` draw per batch row.
pub fn train_denoiser(
    policy: &mut FlowPolicy,
    data: &[(Vec<f64>, Vec<f64>)],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    seed_value: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::Input("no training data".into()));
    }
    let (d, c) = (policy.arch.data_dim, policy.arch.cond_dim);
    let mut z_all = Array2::zeros((data.len(), policy.arch.latent_dim));
    let mut c_all = Array2::zeros((data.len(), c));
    for (i, (v, cond)) in data.iter().enumerate() {
        if v.len() != d || cond.len() != c {
            return Err(Error::Contract(format!("training pair {i} does not match the policy dimensions")));
        }
        let z = policy.encode(v, cond);
        z_all.row_mut(i).assign(&ndarray::ArrayView1::from(&z[..]));
        c_all.row_mut(i).assign(&ndarray::ArrayView1::from(&cond[..]));
    }
    let mut rng = seed::rng(seed_value, &[seed::stream::SFT_BATCH]);
    let mut log = TrainLog::default();
    let b = cfg.batch_size;
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..data.len())).collect();
        let z = z_all.select(Axis(0), &idx);
        let cond = c_all.select(Axis(0), &idx);
        let mut sigmas = Vec::with_capacity(b);
        let mut eps = Array2::zeros((b, policy.arch.latent_dim));
        for mut row in eps.axis_iter_mut(Axis(0)) {
            sigmas.push(schedule.draw_sigma(&mut rng));
            row.mapv_inplace(|_| rng.sample(StandardNormal));
        }
        let draws = NoiseDraws { sigmas, eps };
        let mut tape = Tape::new();
        let terms = policy.terms_on_tape(&mut tape, &z, &cond, &draws, schedule)?;
        let loss = tape.mean(terms)?;
        log.losses.push(tape.scalar(loss));
        tape.backward(loss, &mut [&mut policy.store])?;
        clip_grad_norm(&mut policy.store, cfg.grad_clip);
        let opt = AdamW {
            lr: cfg.lr_at(step),
            ..cfg.optimizer
        };
        opt.step(&mut policy.store)?;
    }
    Ok(log)
}
