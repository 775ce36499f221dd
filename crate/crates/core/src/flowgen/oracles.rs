//! Closed-form denoisers used as test oracles and study references.

use ndarray::{Array2, Axis};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

use super::Denoiser;

fn check(x: &Tensor, sigma: &[f64], cond: &Tensor, d: usize, c: usize) -> Result<()> {
    if x.ncols() != d || cond.ncols() != c || x.nrows() != sigma.len() || cond.nrows() != sigma.len() {
        return Err(Error::Contract("oracle denoiser input shapes do not match".into()));
    }
    Ok(())
}

/// `D(x) = x`: the vector field vanishes and the flow is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityFlow {
    pub dim: usize,
    pub cond_dim: usize,
}

impl Denoiser for IdentityFlow {
    fn data_dim(&self) -> usize {
        self.dim
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn denoise(&self, x: &Tensor, sigma: &[f64], cond: &Tensor) -> Result<Tensor> {
        check(x, sigma, cond, self.dim, self.cond_dim)?;
        Ok(x.clone())
    }
}

/// Always predicts the same clean sample: the exact denoiser of a point mass.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantDenoiser {
    pub value: Vec<f64>,
    pub cond_dim: usize,
}

impl Denoiser for ConstantDenoiser {
    fn data_dim(&self) -> usize {
        self.value.len()
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn denoise(&self, x: &Tensor, sigma: &[f64], cond: &Tensor) -> Result<Tensor> {
        check(x, sigma, cond, self.value.len(), self.cond_dim)?;
        Ok(super::tile_row(&self.value, x.nrows()))
    }
}

/// Exact denoiser of an isotropic Gaussian mixture with weights `weights`,
/// means `means` and common standard deviation `std`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmDenoiser {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub std: f64,
    pub cond_dim: usize,
}

impl GmmDenoiser {
    pub fn gaussian(mean: Vec<f64>, std: f64, cond_dim: usize) -> Self {
        GmmDenoiser {
            weights: vec![1.0],
            means: vec![mean],
            std,
            cond_dim,
        }
    }

    /// Log-density of the mixture convolved with `N(0, σ² I)`.
    pub fn log_density(&self, v: &[f64], sigma: f64) -> f64 {
        let var = self.std * self.std + sigma * sigma;
        let d = v.len() as f64;
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| {
                let q: f64 = v.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
                w.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * q / var
            })
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln()
    }
}

impl Denoiser for GmmDenoiser {
    fn data_dim(&self) -> usize {
        self.means[0].len()
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn denoise(&self, x: &Tensor, sigma: &[f64], cond: &Tensor) -> Result<Tensor> {
        let d = self.data_dim();
        check(x, sigma, cond, d, self.cond_dim)?;
        let s2 = self.std * self.std;
        let mut out = Array2::zeros(x.dim());
        for ((mut o, xr), &s) in out.axis_iter_mut(Axis(0)).zip(x.axis_iter(Axis(0))).zip(sigma) {
            let var = s2 + s * s;
            let logs: Vec<f64> = self
                .weights
                .iter()
                .zip(&self.means)
                .map(|(w, m)| w.ln() - 0.5 * xr.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / var)
                .collect();
            let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let resp: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
            let total: f64 = resp.iter().sum();
            for (r, m) in resp.iter().zip(&self.means) {
                for j in 0..d {
                    // posterior mean of component m given x
                    o[j] += r / total * (m[j] + s2 / var * (xr[j] - m[j]));
                }
            }
        }
        Ok(out)
    }
}
