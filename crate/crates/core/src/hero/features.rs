use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::microworld::{TaskKind, Trajectory};

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Width of the raw per-frame feature vector for `n` objects and frame width `d`.
pub fn raw_feature_dim(frame_dim: usize, cond_dim: usize, n_objects: usize) -> usize {
    // state and three temporal differences, contact gaps, support gaps, goal offsets, time, condition
    4 * frame_dim + (2 * n_objects + n_objects * (n_objects - 1) / 2) + n_objects + (3 + 2 * n_objects) + 1 + cond_dim
}

/// Length unit of the log-scaled support gaps.
const GAP_UNIT: f64 = 1e-3;

/// Per-frame features of a rollout: the state, its first three temporal
/// differences (one-sided at the ends), signed contact gaps, log-scaled gaps
/// to the nearest support below each object, offsets to the goal,
/// normalized time, and the condition features.
pub fn raw_features(traj: &Trajectory, gripper_radius: f64) -> Tensor {
    let layout = traj.layout();
    let n = layout.n_objects;
    let t_len = traj.n_frames();
    let d = traj.frame_dim();
    let cond = &traj.condition;
    let cf = cond.features();
    let radii = &cond.radii;
    let width = raw_feature_dim(d, cf.len(), n);
    let at = |t: isize| traj.frame(t.clamp(0, t_len as isize - 1) as usize);
    let mut out = Array2::zeros((t_len, width));
    for t in 0..t_len {
        let ti = t as isize;
        let (f0, fm1, fm2, fp1) = (at(ti), at(ti - 1), at(ti - 2), at(ti + 1));
        let mut row = Vec::with_capacity(width);
        row.extend_from_slice(f0);
        row.extend((0..d).map(|i| f0[i] - fm1[i]));
        row.extend((0..d).map(|i| fp1[i] - 2.0 * f0[i] + fm1[i]));
        row.extend((0..d).map(|i| fp1[i] - 3.0 * f0[i] + 3.0 * fm1[i] - fm2[i]));
        let g = layout.gripper(f0);
        for j in 0..n {
            let p = layout.pos(f0, j);
            row.push(dist(p, g) - gripper_radius - radii[j]);
            row.push(p[1] - radii[j]);
        }
        for i in 0..n {
            for j in i + 1..n {
                row.push(dist(layout.pos(f0, i), layout.pos(f0, j)) - radii[i] - radii[j]);
            }
        }
        for j in 0..n {
            let p = layout.pos(f0, j);
            let mut gap = (p[1] - radii[j]).min(dist(p, g) - gripper_radius - radii[j]);
            for i in (0..n).filter(|&i| i != j) {
                let q = layout.pos(f0, i);
                if q[1] < p[1] {
                    gap = gap.min(dist(p, q) - radii[i] - radii[j]);
                }
            }
            row.push((gap / GAP_UNIT).asinh());
        }
        let goal = cond.params.goal;
        let obj = cond.params.object;
        let (pos, target) = match cond.task {
            TaskKind::Reach => (g, goal),
            TaskKind::Stack => {
                let s = cond.params.support.unwrap_or(obj);
                let ps = layout.pos(f0, s);
                (layout.pos(f0, obj), [ps[0], ps[1] + radii[s] + radii[obj]])
            }
            _ => (layout.pos(f0, obj), goal),
        };
        row.push(pos[0] - target[0]);
        row.push(pos[1] - target[1]);
        row.push(dist(pos, target));
        for j in 0..n {
            let p = layout.pos(f0, j);
            row.push(p[0] - goal[0]);
            row.push(p[1] - goal[1]);
        }
        row.push(t as f64 / (t_len - 1) as f64);
        row.extend_from_slice(&cf);
        debug_assert_eq!(row.len(), width);
        out.row_mut(t).assign(&ndarray::ArrayView1::from(&row[..]));
    }
    out
}

/// Per-feature standardization followed by `asinh`, which keeps rare large
/// defects (deep penetration, teleports) from dominating the input scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(features: &[Tensor]) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::Input("cannot fit feature scaling to no rollouts".into()))?;
        let w = first.ncols();
        let mut sum = vec![0.0; w];
        let mut sq = vec![0.0; w];
        let mut count = 0.0;
        for f in features {
            if f.ncols() != w {
                return Err(Error::Input("rollout features differ in width".into()));
            }
            for row in f.axis_iter(Axis(0)) {
                for (i, x) in row.iter().enumerate() {
                    sum[i] += x;
                    sq[i] += x * x;
                }
                count += 1.0;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / count - m * m).max(0.0).sqrt();
                if sd > 1e-9 {
                    sd
                } else {
                    0.0
                }
            })
            .collect();
        Ok(FeatureScaler { mean, scale })
    }

    pub fn apply(&self, raw: &Tensor) -> Result<Tensor> {
        if raw.ncols() != self.mean.len() {
            return Err(Error::Contract(format!(
                "feature width {} does not match the scaler ({})",
                raw.ncols(),
                self.mean.len()
            )));
        }
        let mut out = raw.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (i, x) in row.iter_mut().enumerate() {
                *x = if self.scale[i] > 0.0 {
                    ((*x - self.mean[i]) / self.scale[i]).asinh()
                } else {
                    0.0
                };
            }
        }
        Ok(out)
    }
}
