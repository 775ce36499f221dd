//! Deterministic 2D manipulation world: scripted rollouts, defect injection
//! and rule-based scoring.

mod corrupt;
mod io;
mod oracle;
mod scene;
mod sim;


use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use corrupt::{corrupt, CorruptionKind};
pub use io::{
    read_trajectories, read_trajectory, trajectories_from_bytes, trajectories_to_bytes, trajectory_from_bytes,
    trajectory_to_bytes, write_trajectories, write_trajectory,
};
pub use oracle::{calibrate_rate, clamp_score, defect_measures, oracle_score, physics_breakdown, Dim, OracleConfig, ScoreVector};
pub use scene::{random_condition, Condition, FrameLayout, TaskKind, TaskParams, WorldConfig};
pub use sim::{simulate, step, Body, Command, WorldState};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "kinds")]
pub enum Provenance {
    Clean,
    Corrupted(Vec<CorruptionKind>),
    /// Sampled from a learned policy.
    Generated,
}

/// A rollout: `n_frames` flattened state frames stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    data: Vec<f64>,
    n_frames: usize,
    pub condition: Condition,
    pub provenance: Provenance,
    /// Seed of the scripted controller that produced the rollout.
    pub sim_seed: u64,
}

impl Trajectory {
    pub fn new(
        data: Vec<f64>,
        n_frames: usize,
        condition: Condition,
        provenance: Provenance,
        sim_seed: u64,
    ) -> Result<Self> {
        let d = condition.layout().dim();
        if n_frames < 2 {
            return Err(Error::Input(format!("trajectory needs at least 2 frames, got {n_frames}")));
        }
        if data.len() != n_frames * d {
            return Err(Error::Input(format!(
                "trajectory data has {} values, expected {n_frames}x{d}",
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::Input("trajectory contains non-finite values".into()));
        }
        Ok(Trajectory {
            data,
            n_frames,
            condition,
            provenance,
            sim_seed,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn frame_dim(&self) -> usize {
        self.data.len() / self.n_frames
    }

    pub fn layout(&self) -> FrameLayout {
        self.condition.layout()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let d = self.frame_dim();
        &self.data[t * d..(t + 1) * d]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.frame_dim())
    }

    /// All frames, row-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_array(&self) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_vec((self.n_frames, self.frame_dim()), self.data.clone())
            .expect("shape checked at construction")
    }

    /// Largest absolute entry-wise difference to another trajectory of the same shape.
    pub fn max_abs_diff(&self, other: &Trajectory) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
