use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::AdamW;
use crate::error::{Error, Result};
use crate::{seed, stats};

use super::oracles::GmmDenoiser;
use super::{
    exact_loglik_batch, proxy_loglik, train_denoiser, FlowArch, FlowPolicy, NoiseSchedule, Normalizer,
    TrainConfig, Weighting,
};

/// Rank agreement between the loss proxy and the exact likelihood on a
/// 2D flow trained on a two-component Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyStudyConfig {
    pub separation: f64,
    pub component_std: f64,
    pub n_train: usize,
    pub n_points: usize,
    pub n_draws: usize,
    pub hidden: Vec<usize>,
    pub schedule: NoiseSchedule,
    pub train: TrainConfig,
    pub exact_steps: usize,
}

impl Default for ProxyStudyConfig {
    fn default() -> Self {
        ProxyStudyConfig {
            separation: 3.0,
            component_std: 0.5,
            n_train: 4096,
            n_points: 200,
            n_draws: 64,
            hidden: vec![64, 64, 64],
            schedule: NoiseSchedule {
                sigma_min: 0.01,
                sigma_max: 10.0,
                weighting: Weighting::InvSigmaSq,
            },
            train: TrainConfig {
                steps: 4000,
                batch_size: 128,
                optimizer: AdamW::with_lr(2e-3),
                grad_clip: 1.0,
                final_lr_frac: 0.05,
            },
            exact_steps: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyStudyReport {
    pub n_points: usize,
    pub n_draws: usize,
    pub spearman: f64,
    pub kendall: f64,
    /// Agreement of the trained model's exact likelihood with the true density.
    pub exact_vs_true_spearman: f64,
    pub final_train_loss: f64,
    pub proxy: Vec<f64>,
    pub exact: Vec<f64>,
    pub true_logpdf: Vec<f64>,
}

impl ProxyStudyConfig {
    pub fn mixture(&self) -> GmmDenoiser {
        let h = self.separation / 2.0;
        GmmDenoiser {
            weights: vec![0.5, 0.5],
            means: vec![vec![-h, 0.0], vec![h, 0.0]],
            std: self.component_std,
            cond_dim: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.train.validate()?;
        if self.n_points < 2 || self.n_draws == 0 || self.n_train == 0 || !(self.component_std > 0.0) {
            return Err(Error::Config(format!("invalid proxy study settings {self:?}")));
        }
        Ok(())
    }
}

fn draw_mixture<R: Rng>(gmm: &GmmDenoiser, rng: &mut R) -> Vec<f64> {
    let m = &gmm.means[usize::from(rng.gen::<f64>() >= gmm.weights[0])];
    m.iter()
        .map(|mu| mu + gmm.std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Trains the 2D policy, then scores held-out mixture draws with the proxy
/// (one shared noise key for every point) and with the exact likelihood.
pub fn run_proxy_study(cfg: &ProxyStudyConfig, seed_value: u64) -> Result<ProxyStudyReport> {
    cfg.validate()?;
    let gmm = cfg.mixture();
    let mut rng = seed::rng(seed_value, &[seed::stream::PROXY_STUDY]);
    let train: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.n_train).map(|_| (draw_mixture(&gmm, &mut rng), vec![])).collect();
    let held: Vec<Vec<f64>> = (0..cfg.n_points).map(|_| draw_mixture(&gmm, &mut rng)).collect();
    let shared_key = rng.gen::<u64>();

    let arch = FlowArch::new(0, cfg.hidden.clone(), Normalizer::identity(2));
    let mut policy = FlowPolicy::new(arch, seed_value)?;
    let log = train_denoiser(&mut policy, &train, &cfg.schedule, &cfg.train, seed_value)?;

    let proxy = held
        .iter()
        .map(|v| proxy_loglik(&policy, v, &[], &cfg.schedule, cfg.n_draws, shared_key))
        .collect::<Result<Vec<f64>>>()?;
    let flat: Vec<f64> = held.iter().flatten().copied().collect();
    let pts = Array2::from_shape_vec((cfg.n_points, 2), flat).expect("2D points");
    let exact = exact_loglik_batch(&policy, &pts, &Array2::zeros((cfg.n_points, 0)), &cfg.schedule, cfg.exact_steps)?;
    let true_logpdf: Vec<f64> = held.iter().map(|v| gmm.log_density(v, 0.0)).collect();

    Ok(ProxyStudyReport {
        n_points: cfg.n_points,
        n_draws: cfg.n_draws,
        spearman: stats::spearman(&proxy, &exact)?,
        kendall: stats::kendall_tau_b(&proxy, &exact)?,
        exact_vs_true_spearman: stats::spearman(&exact, &true_logpdf)?,
        final_train_loss: log.tail_mean(200),
        proxy,
        exact,
        true_logpdf,
    })
}
