use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::scene::{TaskKind, WorldConfig};
use super::Trajectory;

/// The four preference dimensions, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dim {
    Phys,
    Embod,
    Task,
    Vis,
}

impl Dim {
    pub const ALL: [Dim; 4] = [Dim::Phys, Dim::Embod, Dim::Task, Dim::Vis];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Dim::Phys => "phys",
            Dim::Embod => "embod",
            Dim::Task => "task",
            Dim::Vis => "vis",
        }
    }
}

impl std::fmt::Display for Dim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Dim {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dim::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown dimension `{s}`")))
    }
}

/// Scores on the 1 to 6 scale, one per dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub phys: f64,
    pub embod: f64,
    pub task: f64,
    pub vis: f64,
}

impl ScoreVector {
    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        if !a.iter().all(|s| (1.0..=6.0).contains(s)) {
            return Err(Error::Input(format!("scores {a:?} outside [1, 6]")));
        }
        Ok(ScoreVector {
            phys: a[0],
            embod: a[1],
            task: a[2],
            vis: a[3],
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.phys, self.embod, self.task, self.vis]
    }

    pub fn get(&self, k: Dim) -> f64 {
        self.as_array()[k.index()]
    }

    pub fn sum(&self) -> f64 {
        self.as_array().iter().sum()
    }
}

/// Rates of the score clamp `1 + 5·exp(-λ·measure)`, one per dimension.
///
/// The defaults come from [`calibrate_rate`] runs over severity-1 defects;
/// see the `oracle_calibration` test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub lambda_phys: f64,
    pub lambda_embod: f64,
    pub lambda_task: f64,
    pub lambda_vis: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            lambda_phys: 0.35,
            lambda_embod: 180.0,
            lambda_task: 12.0,
            lambda_vis: 40.0,
        }
    }
}

impl OracleConfig {
    pub fn lambdas(&self) -> [f64; 4] {
        [self.lambda_phys, self.lambda_embod, self.lambda_task, self.lambda_vis]
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas().iter().all(|l| *l > 0.0 && l.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("oracle rates must be positive, got {self:?}")))
        }
    }
}

/// Maps a non-negative defect measure onto the 1 to 6 scale.
pub fn clamp_score(lambda: f64, measure: f64) -> f64 {
    (1.0 + 5.0 * (-lambda * measure.max(0.0)).exp()).clamp(1.0, 6.0)
}

/// Extra slack when deciding whether bodies touch.
const SUPPORT_TOL: f64 = 0.01;
/// An object within this distance of the grasp point of a closed gripper is held.
const HELD_TOL: f64 = 0.02;
/// Displacement slack of the teleport detector.
const TELEPORT_SLACK: f64 = 0.02;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Parts of the physics defect measure: `[penetration, levitation,
/// teleport]`. Penetration depth and unexplained displacement are summed
/// over frames; levitation sums a per-frame deviation from free fall capped at 1.
pub fn physics_breakdown(traj: &Trajectory, world: &WorldConfig) -> Result<[f64; 3]> {
    if !traj.data().iter().all(|x| x.is_finite()) {
        return Err(Error::Input("trajectory contains non-finite values".into()));
    }
    let layout = traj.layout();
    let n = layout.n_objects;
    let radii = &traj.condition.radii;
    let t_len = traj.n_frames();
    let (dt, g, floor) = (world.dt, world.gravity, world.floor_y);
    let rg = world.gripper_radius;

    let held = |t: usize, j: usize| -> bool {
        let f = traj.frame(t);
        let gp = layout.gripper(f);
        layout.closed(f) && dist(layout.pos(f, j), [gp[0], gp[1] - rg - radii[j]]) < HELD_TOL
    };
    let supported = |t: usize, j: usize| -> bool {
        let f = traj.frame(t);
        let p = layout.pos(f, j);
        if p[1] - radii[j] - floor <= SUPPORT_TOL {
            return true;
        }
        if dist(p, layout.gripper(f)) <= rg + radii[j] + SUPPORT_TOL {
            return true;
        }
        (0..n).any(|i| {
            let q = layout.pos(f, i);
            i != j && q[1] < p[1] && dist(p, q) <= radii[i] + radii[j] + SUPPORT_TOL
        })
    };

    // penetration
    let tol = world.contact_tol;
    let mut pen = 0.0;
    for f in traj.frames() {
        let gp = layout.gripper(f);
        for j in 0..n {
            let p = layout.pos(f, j);
            pen += (floor + radii[j] - p[1] - tol).max(0.0);
            pen += (rg + radii[j] - dist(p, gp) - tol).max(0.0);
            for i in j + 1..n {
                pen += (radii[i] + radii[j] - dist(p, layout.pos(f, i)) - tol).max(0.0);
            }
        }
    }

    // levitation: free objects must accelerate at -g
    let mut lev = 0.0;
    for t in 1..t_len.saturating_sub(1) {
        for j in 0..n {
            let free = (t - 1..=t + 1).all(|s| !held(s, j) && !supported(s, j));
            if !free {
                continue;
            }
            let y = |s: usize| layout.pos(traj.frame(s), j)[1];
            let acc = (y(t + 1) - 2.0 * y(t) + y(t - 1)) / (dt * dt);
            lev += ((acc + g).abs() / g.max(1e-9)).min(1.0);
        }
    }

    // teleport: displacement not explained by the recorded velocities
    let mut tel = 0.0;
    for t in 0..t_len - 1 {
        let (f0, f1) = (traj.frame(t), traj.frame(t + 1));
        for j in 0..n {
            if held(t, j) || held(t + 1, j) {
                continue;
            }
            let step = dist(layout.pos(f1, j), layout.pos(f0, j));
            let speed = |f: &[f64]| {
                let v = layout.vel(f, j);
                (v[0] * v[0] + v[1] * v[1]).sqrt()
            };
            let allowed = 2.0 * (speed(f0) + speed(f1)) * dt + g * dt * dt + TELEPORT_SLACK;
            tel += (step - allowed).max(0.0);
        }
    }
    Ok([pen, lev, tel])
}

/// Raw defect measures `[phys, embod, task, vis]`; all zero for a perfect rollout.
pub fn defect_measures(traj: &Trajectory, world: &WorldConfig) -> Result<[f64; 4]> {
    let [pen, lev, tel] = physics_breakdown(traj, world)?;
    let layout = traj.layout();
    let n = layout.n_objects;
    let radii = &traj.condition.radii;
    let t_len = traj.n_frames();
    let phys = (pen + tel) / world.object_radius + lev;

    // embodiment: mean squared third difference of the gripper path
    let embod = if t_len >= 4 {
        let gp = |t: usize| layout.gripper(traj.frame(t));
        let mut acc = 0.0;
        for t in 0..t_len - 3 {
            let (a, b, c, d) = (gp(t), gp(t + 1), gp(t + 2), gp(t + 3));
            for k in 0..2 {
                let j3 = d[k] - 3.0 * c[k] + 3.0 * b[k] - a[k];
                acc += j3 * j3;
            }
        }
        acc / (t_len - 3) as f64
    } else {
        0.0
    };

    // task: final distance to the goal predicate
    let cond = &traj.condition;
    let last = traj.frame(t_len - 1);
    let goal = cond.params.goal;
    let obj = cond.params.object;
    let d_final = match cond.task {
        TaskKind::Reach => dist(layout.gripper(last), goal),
        TaskKind::Pick | TaskKind::Place | TaskKind::Push => dist(layout.pos(last, obj), goal),
        TaskKind::Stack => {
            let s = cond
                .params
                .support
                .ok_or_else(|| Error::Input("stack task without support".into()))?;
            let ps = layout.pos(last, s);
            dist(layout.pos(last, obj), [ps[0], ps[1] + radii[s] + radii[obj]])
        }
    };
    let task = (d_final - world.goal_tol).max(0.0);

    // appearance: second-difference energy of the shade channels
    let vis = if t_len >= 3 {
        let mut acc = 0.0;
        for t in 1..t_len - 1 {
            for j in 0..n {
                let k = layout.shade_index(j);
                let d2 = traj.frame(t + 1)[k] - 2.0 * traj.frame(t)[k] + traj.frame(t - 1)[k];
                acc += d2 * d2;
            }
        }
        acc / ((t_len - 2) * n) as f64
    } else {
        0.0
    };

    Ok([phys, embod, task, vis])
}

/// Rule-based 4D score of a rollout.
pub fn oracle_score(traj: &Trajectory, world: &WorldConfig, cfg: &OracleConfig) -> Result<ScoreVector> {
    let m = defect_measures(traj, world)?;
    let l = cfg.lambdas();
    ScoreVector::from_array([
        clamp_score(l[0], m[0]),
        clamp_score(l[1], m[1]),
        clamp_score(l[2], m[2]),
        clamp_score(l[3], m[3]),
    ])
}

/// Smallest rate λ for which the mean of `1 + 5·exp(-λ·m)` over `measures`
/// is at most `target`, found by bisection.
pub fn calibrate_rate(measures: &[f64], target: f64) -> Result<f64> {
    if measures.is_empty() || !(1.0 < target && target < 6.0) {
        return Err(Error::Contract("calibration needs measures and a target in (1, 6)".into()));
    }
    let mean_score = |lam: f64| {
        measures.iter().map(|&m| clamp_score(lam, m)).sum::<f64>() / measures.len() as f64
    };
    let mut hi = 1e-6;
    while mean_score(hi) > target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::numeric("calibration: defect measures too small"));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_score(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}
