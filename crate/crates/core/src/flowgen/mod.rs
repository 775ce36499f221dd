//! Conditional flow-matching policy: denoising loss, deterministic sampling,
//! exact log-likelihood at low dimension, and the loss-based likelihood proxy.
//!
//! Noise follows the variance-exploding convention `x_σ = v + σ·ε`. A
//! [`Denoiser`] predicts the clean sample `D(x_σ, σ, c)`; its probability-flow
//! ODE is `dx/dσ = (x − D(x, σ, c)) / σ`.

pub mod oracles;
mod policy;
mod study;

#[cfg(test)]
mod tests;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::seed;

pub use policy::{train_denoiser, FlowArch, FlowPolicy, Normalizer, TrainConfig, TrainLog};
pub use study::{run_proxy_study, ProxyStudyConfig, ProxyStudyReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w(σ) = 1/σ²`
    InvSigmaSq,
    /// `w(σ) = 1`
    Unit,
}

/// Noise levels for training, the loss proxy, and sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub weighting: Weighting,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            sigma_min: 0.02,
            sigma_max: 2.0,
            weighting: Weighting::InvSigmaSq,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid noise schedule {self:?}")))
        }
    }

    pub fn weight(&self, sigma: f64) -> f64 {
        match self.weighting {
            Weighting::InvSigmaSq => 1.0 / (sigma * sigma),
            Weighting::Unit => 1.0,
        }
    }

    /// Log-uniform draw on `[σ_min, σ_max]`.
    pub fn draw_sigma<R: Rng>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = (self.sigma_min.ln(), self.sigma_max.ln());
        (lo + rng.gen::<f64>() * (hi - lo)).exp()
    }

    /// Geometric grid from `σ_max` down to `σ_min` with `steps + 1` points.
    pub fn grid(&self, steps: usize) -> Vec<f64> {
        let ratio = self.sigma_min / self.sigma_max;
        (0..=steps)
            .map(|i| {
                if i == steps {
                    self.sigma_min
                } else {
                    self.sigma_max * ratio.powf(i as f64 / steps as f64)
                }
            })
            .collect()
    }
}

/// The `(σ, ε)` draws identified by one key.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraws {
    pub sigmas: Vec<f64>,
    /// One row of standard-normal noise per draw.
    pub eps: Tensor,
}

/// Replays the `n` noise draws of `rng_key` for a `dim`-dimensional sample.
///
/// Draws come in antithetic pairs `(σ, ε)`, `(σ, −ε)`. The σ of pair `k` is
/// log-uniform within the `k`-th of `⌈n/2⌉` equal log-width strata, so every
/// σ is marginally log-uniform on the schedule and every ε standard normal;
/// the mean over draws stays an unbiased estimate of the loss. An odd `n`
/// leaves the last draw unpaired.
pub fn draw_noise(rng_key: u64, n: usize, dim: usize, schedule: &NoiseSchedule) -> NoiseDraws {
    let mut rng = seed::rng(rng_key, &[seed::stream::CFM_KEY]);
    let strata = n.div_ceil(2);
    let (lo, hi) = (schedule.sigma_min.ln(), schedule.sigma_max.ln());
    let mut sigmas = Vec::with_capacity(n);
    let mut eps = Array2::zeros((n, dim));
    for i in 0..n {
        if i % 2 == 1 {
            sigmas.push(sigmas[i - 1]);
            let prev = eps.row(i - 1).mapv(|e: f64| -e);
            eps.row_mut(i).assign(&prev);
            continue;
        }
        let u = ((i / 2) as f64 + rng.gen::<f64>()) / strata as f64;
        sigmas.push((lo + u * (hi - lo)).exp());
        for e in eps.row_mut(i).iter_mut() {
            *e = rng.sample(StandardNormal);
        }
    }
    NoiseDraws { sigmas, eps }
}

/// A denoiser working in its own (model) coordinates, with maps to and from
/// data coordinates.
pub trait Denoiser {
    fn data_dim(&self) -> usize;

    /// Width of the model coordinates in which noise is added.
    fn latent_dim(&self) -> usize {
        self.data_dim()
    }

    fn cond_dim(&self) -> usize;

    /// Batched `D(x, σ, c)`: row `i` of `x` is denoised at `sigma[i]` under row `i` of `cond`.
    fn denoise(&self, x: &Tensor, sigma: &[f64], cond: &Tensor) -> Result<Tensor>;

    fn encode(&self, v: &[f64], _cond: &[f64]) -> Vec<f64> {
        v.to_vec()
    }

    fn decode(&self, z: &[f64], _cond: &[f64]) -> Vec<f64> {
        z.to_vec()
    }

    /// `log |det ∂encode/∂v|`, constant for affine encoders.
    fn log_det_encode(&self) -> f64 {
        0.0
    }

    /// Per-draw loss terms `w(σ_i)·‖D(z + σ_i ε_i, σ_i, c) − z‖²` in model coordinates.
    fn cfm_terms(&self, z: &[f64], cond: &[f64], draws: &NoiseDraws, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        let n = draws.sigmas.len();
        let zt = tile_row(z, n);
        let mut x = zt.clone();
        for (mut row, (&s, e)) in x
            .axis_iter_mut(Axis(0))
            .zip(draws.sigmas.iter().zip(draws.eps.axis_iter(Axis(0))))
        {
            row.scaled_add(s, &e);
        }
        let d = self.denoise(&x, &draws.sigmas, &tile_row(cond, n))?;
        Ok(d.axis_iter(Axis(0))
            .zip(zt.axis_iter(Axis(0)))
            .zip(&draws.sigmas)
            .map(|((dr, zr), &s)| {
                schedule.weight(s) * dr.iter().zip(zr).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .collect())
    }
}

pub(crate) fn tile_row(v: &[f64], n: usize) -> Tensor {
    let mut t = Array2::zeros((n, v.len()));
    for mut row in t.axis_iter_mut(Axis(0)) {
        row.assign(&ndarray::ArrayView1::from(v));
    }
    t
}

fn check_dims<D: Denoiser + ?Sized>(model: &D, v: &[f64], cond: &[f64]) -> Result<()> {
    if v.len() != model.data_dim() || cond.len() != model.cond_dim() {
        return Err(Error::Contract(format!(
            "policy expects data {} and condition {}, got {} and {}",
            model.data_dim(),
            model.cond_dim(),
            v.len(),
            cond.len()
        )));
    }
    Ok(())
}

/// Monte-Carlo denoising loss of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfmEstimate {
    pub value: f64,
    pub n_samples: usize,
    pub terms: Vec<f64>,
    pub rng_key: u64,
}

impl CfmEstimate {
    pub fn from_terms(terms: Vec<f64>, rng_key: u64) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Contract("loss estimate without terms".into()));
        }
        if !terms.iter().all(|t| t.is_finite()) {
            return Err(Error::numeric("denoising loss terms"));
        }
        let value = terms.iter().sum::<f64>() / terms.len() as f64;
        Ok(CfmEstimate {
            value,
            n_samples: terms.len(),
            terms,
            rng_key,
        })
    }
}

/// Denoising loss of `v` under `model`, averaged over the `n` draws of `rng_key`.
pub fn cfm_loss<D: Denoiser + ?Sized>(
    model: &D,
    v: &[f64],
    cond: &[f64],
    schedule: &NoiseSchedule,
    n: usize,
    rng_key: u64,
) -> Result<CfmEstimate> {
    check_dims(model, v, cond)?;
    if n == 0 {
        return Err(Error::Contract("need at least one noise draw".into()));
    }
    let z = model.encode(v, cond);
    let draws = draw_noise(rng_key, n, model.latent_dim(), schedule);
    let terms = model.cfm_terms(&z, cond, &draws, schedule)?;
    CfmEstimate::from_terms(terms, rng_key)
}

/// `−L_CFM`: a log-likelihood surrogate defined up to a condition-dependent constant.
pub fn proxy_loglik<D: Denoiser + ?Sized>(
    model: &D,
    v: &[f64],
    cond: &[f64],
    schedule: &NoiseSchedule,
    n: usize,
    rng_key: u64,
) -> Result<f64> {
    Ok(-cfm_loss(model, v, cond, schedule, n, rng_key)?.value)
}

/// Deterministic Euler integration of the probability-flow ODE from `σ_max`
/// to `σ_min`, one sample per row of `cond`, each seeded by its own key.
/// The final state is denoised once more at `σ_min`.
pub fn sample_batch<D: Denoiser + ?Sized>(
    model: &D,
    cond: &Tensor,
    schedule: &NoiseSchedule,
    steps: usize,
    rng_keys: &[u64],
) -> Result<Vec<Vec<f64>>> {
    if steps == 0 {
        return Err(Error::Contract("sampling needs at least one step".into()));
    }
    schedule.validate()?;
    let (rows, d) = (rng_keys.len(), model.latent_dim());
    if cond.nrows() != rows || cond.ncols() != model.cond_dim() {
        return Err(Error::Contract("condition batch does not match the keys".into()));
    }
    let grid = schedule.grid(steps);
    let mut x = Array2::zeros((rows, d));
    for (mut row, &key) in x.axis_iter_mut(Axis(0)).zip(rng_keys) {
        let mut rng = seed::rng(key, &[seed::stream::COLLECT]);
        for e in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *e = grid[0] * z;
        }
    }
    for i in 0..steps {
        let (s, s_next) = (grid[i], grid[i + 1]);
        let den = model.denoise(&x, &vec![s; rows], cond)?;
        let h = (s_next - s) / s;
        x = &x + &((&x - &den) * h);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!("sampler state at step {i}")));
        }
    }
    let out = model.denoise(&x, &vec![schedule.sigma_min; rows], cond)?;
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric(format!("sampler output at step {steps}")));
    }
    Ok(out
        .axis_iter(Axis(0))
        .zip(cond.axis_iter(Axis(0)))
        .map(|(z, c)| model.decode(z.as_slice().expect("row"), c.as_slice().expect("row")))
        .collect())
}

pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    cond: &[f64],
    schedule: &NoiseSchedule,
    steps: usize,
    rng_key: u64,
) -> Result<Vec<f64>> {
    if cond.len() != model.cond_dim() {
        return Err(Error::Contract("condition width does not match the policy".into()));
    }
    Ok(sample_batch(model, &tile_row(cond, 1), schedule, steps, &[rng_key])?.remove(0))
}

/// Largest data dimension accepted by [`exact_loglik`].
pub const EXACT_DIM_CAP: usize = 16;

/// Step of the central differences used for the Jacobian trace.
const TRACE_STEP: f64 = 1e-4;

/// `x − D(x)` and the exact divergence `d − tr ∂D/∂x` for every row.
fn drift_and_div<D: Denoiser + ?Sized>(model: &D, x: &Tensor, sigma: f64, cond: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (rows, d) = x.dim();
    // Row block 0: the states; then ±h perturbations per coordinate.
    let mut all = Array2::zeros((rows * (1 + 2 * d), d));
    let mut conds = Array2::zeros((rows * (1 + 2 * d), cond.ncols()));
    for r in 0..rows {
        for b in 0..(1 + 2 * d) {
            let idx = b * rows + r;
            all.row_mut(idx).assign(&x.row(r));
            conds.row_mut(idx).assign(&cond.row(r));
            if b > 0 {
                let coord = (b - 1) / 2;
                let sign = if (b - 1) % 2 == 0 { 1.0 } else { -1.0 };
                all[[idx, coord]] += sign * TRACE_STEP;
            }
        }
    }
    let den = model.denoise(&all, &vec![sigma; all.nrows()], &conds)?;
    let drift = x - &den.slice(ndarray::s![0..rows, ..]);
    let mut div = vec![d as f64; rows];
    for (r, dv) in div.iter_mut().enumerate() {
        for i in 0..d {
            let plus = den[[(1 + 2 * i) * rows + r, i]];
            let minus = den[[(2 + 2 * i) * rows + r, i]];
            *dv -= (plus - minus) / (2.0 * TRACE_STEP);
        }
    }
    Ok((drift, div))
}

/// Exact log-density of each row of `v` by the instantaneous change of
/// variables along the probability-flow ODE.
///
/// The ODE is integrated from `σ_min` to `σ_max` in `t = ln σ`, where
/// `dx/dt = x − D(x, σ)` and `d log p/dt = −(d − tr ∂D/∂x)`, with a classical
/// fourth-order Runge–Kutta rule. The end state is scored under `N(0, σ_max² I)`.
/// Traces use central differences per coordinate, so the cost grows as d².
pub fn exact_loglik_batch<D: Denoiser + ?Sized>(
    model: &D,
    v: &Tensor,
    cond: &Tensor,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<Vec<f64>> {
    let d = model.data_dim();
    if model.latent_dim() != d {
        return Err(Error::Capability(format!(
            "exact log-likelihood needs an invertible encoder, policy maps {d} values to {} coordinates",
            model.latent_dim()
        )));
    }
    if d > EXACT_DIM_CAP {
        return Err(Error::Capability(format!(
            "exact log-likelihood is limited to {EXACT_DIM_CAP} dimensions, policy has {d}"
        )));
    }
    if steps < 8 {
        return Err(Error::Contract(format!("exact log-likelihood needs at least 8 steps, got {steps}")));
    }
    if v.ncols() != d || cond.ncols() != model.cond_dim() || cond.nrows() != v.nrows() {
        return Err(Error::Contract("exact log-likelihood inputs do not match the policy".into()));
    }
    schedule.validate()?;
    let rows = v.nrows();
    let mut x = Array2::zeros((rows, d));
    for (mut xr, (vr, cr)) in x
        .axis_iter_mut(Axis(0))
        .zip(v.axis_iter(Axis(0)).zip(cond.axis_iter(Axis(0))))
    {
        let z = model.encode(&vr.to_vec(), &cr.to_vec());
        xr.assign(&ndarray::ArrayView1::from(&z[..]));
    }
    let (t0, t1) = (schedule.sigma_min.ln(), schedule.sigma_max.ln());
    let h = (t1 - t0) / steps as f64;
    let mut div_int = vec![0.0; rows];
    for i in 0..steps {
        let t = t0 + h * i as f64;
        let (k1, g1) = drift_and_div(model, &x, t.exp(), cond)?;
        let x2 = &x + &(&k1 * (h / 2.0));
        let (k2, g2) = drift_and_div(model, &x2, (t + h / 2.0).exp(), cond)?;
        let x3 = &x + &(&k2 * (h / 2.0));
        let (k3, g3) = drift_and_div(model, &x3, (t + h / 2.0).exp(), cond)?;
        let x4 = &x + &(&k3 * h);
        let (k4, g4) = drift_and_div(model, &x4, (t + h).exp(), cond)?;
        x = &x + &((&k1 + &(&k2 * 2.0) + &(&k3 * 2.0) + &k4) * (h / 6.0));
        for r in 0..rows {
            div_int[r] += h / 6.0 * (g1[r] + 2.0 * g2[r] + 2.0 * g3[r] + g4[r]);
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!("likelihood ODE at step {i}")));
        }
    }
    let s2 = schedule.sigma_max * schedule.sigma_max;
    let log_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * s2).ln();
    Ok(x.axis_iter(Axis(0))
        .zip(div_int)
        .map(|(xr, dv)| log_norm - 0.5 * xr.iter().map(|a| a * a).sum::<f64>() / s2 + dv + model.log_det_encode())
        .collect())
}

pub fn exact_loglik<D: Denoiser + ?Sized>(
    model: &D,
    v: &[f64],
    cond: &[f64],
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<f64> {
    check_dims(model, v, cond)?;
    Ok(exact_loglik_batch(model, &tile_row(v, 1), &tile_row(cond, 1), schedule, steps)?[0])
}
