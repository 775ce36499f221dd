use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

use super::oracle::Dim;
use super::scene::{TaskKind, WorldConfig};
use super::{sim, Provenance, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Penetration,
    Levitation,
    Teleport,
    Jerk,
    TaskSwap,
    Noise,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::Penetration,
        CorruptionKind::Levitation,
        CorruptionKind::Teleport,
        CorruptionKind::Jerk,
        CorruptionKind::TaskSwap,
        CorruptionKind::Noise,
    ];

    /// The dimension this defect is meant to degrade.
    pub fn dim(self) -> Dim {
        match self {
            CorruptionKind::Penetration | CorruptionKind::Levitation | CorruptionKind::Teleport => {
                Dim::Phys
            }
            CorruptionKind::Jerk => Dim::Embod,
            CorruptionKind::TaskSwap => Dim::Task,
            CorruptionKind::Noise => Dim::Vis,
        }
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

/// Smooth window weight, zero outside `[start, start + len)`.
fn bump(t: usize, start: usize, len: usize) -> f64 {
    if t < start || t >= start + len {
        return 0.0;
    }
    let x = (t - start + 1) as f64 / (len + 1) as f64;
    (std::f64::consts::PI * x).sin().powi(2)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

struct Editor {
    data: Vec<f64>,
    d: usize,
}

impl Editor {
    fn get(&self, t: usize, k: usize) -> f64 {
        self.data[t * self.d + k]
    }

    fn add(&mut self, t: usize, k: usize, v: f64) {
        self.data[t * self.d + k] += v;
    }
}

/// Window length and the range of admissible start frames. The window
/// never touches the first or the last frame.
fn window_bounds(t_len: usize) -> (usize, usize, usize) {
    let len = (t_len / 4).max(3).min(t_len.saturating_sub(2).max(1));
    let lo = 1;
    let hi = t_len.saturating_sub(1 + len).max(lo);
    (len, lo, hi)
}

fn random_window<R: Rng>(rng: &mut R, t_len: usize) -> (usize, usize) {
    let (len, lo, hi) = window_bounds(t_len);
    let mid_lo = (t_len / 4).clamp(lo, hi);
    let mid_hi = (t_len / 2).clamp(mid_lo, hi);
    (rng.gen_range(mid_lo..=mid_hi), len)
}

/// Returns a copy of `traj` with a defect of the given kind injected.
///
/// Severity scales the defect amplitude; the first frame is never modified.
/// `task_swap` re-simulates the scripted controller toward a displaced target,
/// so it discards earlier edits and should be applied first when stacking
/// several defects.
pub fn corrupt(
    traj: &Trajectory,
    kind: CorruptionKind,
    severity: f64,
    seed: u64,
    world: &WorldConfig,
) -> Result<Trajectory> {
    if !(severity > 0.0 && severity <= 1.0) {
        return Err(Error::Contract(format!("severity must lie in (0, 1], got {severity}")));
    }
    let mut rng = seed::rng(seed, &[seed::stream::CORRUPT, kind.tag()]);
    let layout = traj.layout();
    let n = layout.n_objects;
    let t_len = traj.n_frames();
    let cond = &traj.condition;
    let radii = &cond.radii;
    let rg = world.gripper_radius;
    let target_obj = if cond.task == TaskKind::Reach { 0 } else { cond.params.object };
    // An object that the manipulation leaves alone, when there is one.
    let bystander = if n > 1 { (target_obj + 1) % n } else { target_obj };

    let mut ed = Editor {
        data: traj.data().to_vec(),
        d: traj.frame_dim(),
    };
    let held = |ed: &Editor, t: usize, j: usize| -> bool {
        let gx = ed.get(t, 0);
        let gy = ed.get(t, 1);
        let b = layout.obj(j);
        ed.get(t, 2) > 0.5 && dist([ed.get(t, b), ed.get(t, b + 1)], [gx, gy - rg - radii[j]]) < 0.02
    };

    match kind {
        CorruptionKind::Penetration => {
            let j = target_obj;
            let b = layout.obj(j);
            let (len, lo, hi) = window_bounds(t_len);
            // first frame of gripper contact, if any
            let contact = (0..t_len).find(|&t| {
                let f = traj.frame(t);
                dist(layout.gripper(f), layout.pos(f, j)) <= rg + radii[j] + 0.02
            });
            match contact {
                Some(tc) => {
                    let start = tc.saturating_sub(len / 2).clamp(lo, hi);
                    for t in start..start + len {
                        let f = traj.frame(t);
                        let (g, p) = (layout.gripper(f), layout.pos(f, j));
                        let dd = dist(g, p).max(1e-9);
                        let shift = 0.9 * severity * (rg + radii[j]) * bump(t, start, len);
                        ed.add(t, b, (g[0] - p[0]) / dd * shift);
                        ed.add(t, b + 1, (g[1] - p[1]) / dd * shift);
                    }
                }
                None => {
                    let (start, len) = random_window(&mut rng, t_len);
                    for t in start..start + len {
                        ed.add(t, b + 1, -0.9 * severity * radii[j] * bump(t, start, len));
                    }
                }
            }
        }
        CorruptionKind::Levitation => {
            let j = bystander;
            let b = layout.obj(j);
            let (start, len) = random_window(&mut rng, t_len);
            for t in start..start + len {
                if !held(&ed, t, j) {
                    ed.add(t, b + 1, 0.3 * severity * bump(t, start, len));
                }
            }
        }
        CorruptionKind::Teleport => {
            let j = bystander;
            let b = layout.obj(j);
            let (start, len) = random_window(&mut rng, t_len);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for t in start..start + len {
                if !held(&ed, t, j) {
                    ed.add(t, b, sign * 0.4 * severity);
                }
            }
        }
        CorruptionKind::Jerk => {
            let (len, lo, hi) = window_bounds(t_len);
            // Prefer windows in which the gripper stays clear of free objects.
            let clear = |start: usize| {
                (start..start + len).all(|t| {
                    let f = traj.frame(t);
                    (0..n).all(|j| {
                        held(&ed, t, j)
                            || dist(layout.gripper(f), layout.pos(f, j)) > rg + radii[j] + 0.06
                    })
                })
            };
            let candidates: Vec<usize> = (lo..=hi).filter(|&s| clear(s)).collect();
            let start = match candidates.choose(&mut rng) {
                Some(&s) => s,
                None => random_window(&mut rng, t_len).0,
            };
            let amp = rng.gen_range(0.03..0.04) * severity;
            let phase = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for t in start..start + len {
                let carried: Vec<usize> = (0..n).filter(|&j| held(&ed, t, j)).collect();
                let dx = phase * amp * if t % 2 == 0 { 1.0 } else { -1.0 } * bump(t, start, len);
                ed.add(t, 0, dx);
                for j in carried {
                    ed.add(t, layout.obj(j), dx);
                }
            }
        }
        CorruptionKind::TaskSwap => {
            let target = swapped_target(traj, severity, world, &mut rng);
            let data = sim::run(cond, t_len, traj.sim_seed, world, Some(target))?;
            ed.data = data;
        }
        CorruptionKind::Noise => {
            let sigma = 0.08 * severity;
            for t in 1..t_len {
                for j in 0..n {
                    let z: f64 = rng.sample(StandardNormal);
                    ed.add(t, layout.shade_index(j), sigma * z);
                }
            }
        }
    }

    let provenance = match &traj.provenance {
        Provenance::Corrupted(kinds) => {
            let mut kinds = kinds.clone();
            kinds.push(kind);
            Provenance::Corrupted(kinds)
        }
        _ => Provenance::Corrupted(vec![kind]),
    };
    Trajectory::new(ed.data, t_len, cond.clone(), provenance, traj.sim_seed)
}

/// Displaced end point for `task_swap`: the goal (or stacking point) moved by
/// `0.6·severity`, kept clear of the other objects.
fn swapped_target<R: Rng>(traj: &Trajectory, severity: f64, world: &WorldConfig, rng: &mut R) -> [f64; 2] {
    let cond = &traj.condition;
    let layout = traj.layout();
    let f0 = traj.frame(0);
    let j = cond.params.object;
    let base = match (cond.task, cond.params.support) {
        (TaskKind::Stack, Some(s)) => {
            let ps = layout.pos(f0, s);
            [ps[0], ps[1] + cond.radii[s] + cond.radii[j]]
        }
        _ => cond.params.goal,
    };
    let floor_goal = matches!(cond.task, TaskKind::Place | TaskKind::Push);
    let offset = 0.6 * severity;
    let mut best = base;
    let mut best_clear = f64::NEG_INFINITY;
    for _ in 0..20 {
        let cand = if floor_goal {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            [(base[0] + sign * offset).clamp(-0.95, 0.95), base[1]]
        } else {
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            [
                (base[0] + offset * a.cos()).clamp(-0.95, 0.95),
                (base[1] + offset * a.sin()).max(world.floor_y + cond.radii[j] + 0.05),
            ]
        };
        let clearance = (0..layout.n_objects)
            .filter(|&i| cond.task == TaskKind::Reach || i != j)
            .map(|i| dist(cand, layout.pos(f0, i)))
            .fold(f64::INFINITY, f64::min);
        if clearance >= 0.3 {
            return cand;
        }
        if clearance > best_clear {
            best_clear = clearance;
            best = cand;
        }
    }
    best
}
