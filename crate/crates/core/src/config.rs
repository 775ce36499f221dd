//! Run configuration.
//!
//! One TOML file describes a run. Any key can be overridden through an
//! environment variable `REWORLD__SECTION__KEY=value`, where the value is
//! parsed as a TOML value and falls back to a plain string. Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::diffcore::AdamW;
use crate::error::{Error, Result};
use crate::flowgen::{NoiseSchedule, ProxyStudyConfig, TrainConfig};
use crate::fpo::FpoConfig;
use crate::hero::HeroConfig;
use crate::microworld::{OracleConfig, WorldConfig};
use crate::prefdata::{PoolConfig, PrefConfig};

pub const ENV_PREFIX: &str = "REWORLD__";

/// Supervised pretraining of the flow policy on clean rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub n_rollouts: usize,
    /// Principal directions kept by the policy encoder.
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            n_rollouts: 2000,
            latent_dim: 64,
            hidden: vec![512; 3],
            train: TrainConfig {
                steps: 10_000,
                ..TrainConfig::default()
            },
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.n_rollouts == 0 || self.latent_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!("invalid policy pretraining settings {self:?}")));
        }
        Ok(())
    }
}

/// Policy samples added to the reward model's annotation pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardDataConfig {
    /// Rollouts sampled from the pretrained policy, one condition each.
    pub policy_samples: usize,
    pub sample_steps: usize,
}

impl Default for RewardDataConfig {
    fn default() -> Self {
        RewardDataConfig {
            policy_samples: 2000,
            sample_steps: 24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Train, validation and test shares of the preference pairs.
    pub fractions: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            fractions: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    /// Start alignment with fresh optimizer moments instead of the pretraining ones.
    pub reset_optimizer: bool,
    /// Iterations between resumable checkpoints.
    pub checkpoint_every: usize,
    /// Whether the critic reads the condition features besides the rollout.
    pub critic_uses_condition: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            reset_optimizer: true,
            checkpoint_every: 5,
            critic_uses_condition: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Write a readable JSON mirror next to every trajectory stream.
    pub json_mirror: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { json_mirror: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub world: WorldConfig,
    pub oracle: OracleConfig,
    pub pool: PoolConfig,
    pub pref: PrefConfig,
    pub split: SplitConfig,
    pub sft: SftConfig,
    pub reward_data: RewardDataConfig,
    pub hero: HeroConfig,
    pub fpo: FpoConfig,
    pub align: AlignConfig,
    pub schedule: NoiseSchedule,
    pub bench: BenchConfig,
    pub proxy_study: ProxyStudyConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            world: WorldConfig::default(),
            oracle: OracleConfig::default(),
            pool: PoolConfig::default(),
            pref: PrefConfig::default(),
            split: SplitConfig::default(),
            sft: SftConfig::default(),
            reward_data: RewardDataConfig::default(),
            hero: HeroConfig::default(),
            fpo: FpoConfig {
                rollouts_per_iter: 512,
                batch_size: 256,
                epochs: 2,
                policy_opt: AdamW::with_lr(1e-5),
                ..FpoConfig::default()
            },
            align: AlignConfig::default(),
            schedule: NoiseSchedule::default(),
            bench: BenchConfig::default(),
            proxy_study: ProxyStudyConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text`, applies the overrides found in `env`, and validates.
    pub fn from_toml<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config syntax: {e}")))?;
        let mut overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        overrides.sort();
        for (key, raw) in overrides {
            apply_override(&mut root, &key[ENV_PREFIX.len()..], &raw)?;
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`) with the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, std::env::vars())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config serialization: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.oracle.validate()?;
        self.pool.validate()?;
        self.pref.validate()?;
        self.sft.validate()?;
        self.hero.validate()?;
        self.fpo.validate()?;
        self.schedule.validate()?;
        self.bench.validate()?;
        self.proxy_study.validate()?;
        let f = self.split.fractions;
        if f.iter().any(|x| !(*x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {f:?} must be non-negative and sum to 1")));
        }
        if self.reward_data.sample_steps == 0 || self.align.checkpoint_every == 0 {
            return Err(Error::Config("sample steps and checkpoint interval must be positive".into()));
        }
        if self.out_dir.as_os_str().is_empty() || self.out_dir.is_file() {
            return Err(Error::Config(format!("output directory {} is not usable", self.out_dir.display())));
        }
        Ok(())
    }
}

fn apply_override(root: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<String> = path.split("__").map(str::to_ascii_lowercase).collect();
    if keys.iter().any(String::is_empty) {
        return Err(Error::Config(format!("malformed override {ENV_PREFIX}{path}")));
    }
    let (last, parents) = keys.split_last().expect("at least one key");
    let mut table = root;
    for k in parents {
        let entry = table
            .entry(k.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {ENV_PREFIX}{path}: `{k}` is not a section")))?;
    }
    table.insert(last.clone(), parse_value(raw));
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
