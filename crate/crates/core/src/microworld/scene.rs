use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical constants and tolerances of the micro-world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Integrator step in world-time units.
    pub dt: f64,
    pub gravity: f64,
    pub floor_y: f64,
    pub gripper_radius: f64,
    pub object_radius: f64,
    /// Contact tolerance δ_c.
    pub contact_tol: f64,
    /// Goal tolerance δ_goal.
    pub goal_tol: f64,
    /// Gripper speed limit (units per time unit).
    pub gripper_max_speed: f64,
    /// Coulomb friction coefficient of the floor.
    pub floor_friction: f64,
    /// An object is captured when it lies this close to the grasp point.
    pub grasp_tol: f64,
    pub n_objects: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            dt: 0.05,
            gravity: 9.81,
            floor_y: 0.0,
            gripper_radius: 0.05,
            object_radius: 0.1,
            contact_tol: 1e-3,
            goal_tol: 0.05,
            gripper_max_speed: 6.0,
            floor_friction: 0.8,
            grasp_tol: 0.01,
            n_objects: 2,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dt > 0.0
            && self.gravity >= 0.0
            && self.gripper_radius > 0.0
            && self.object_radius > 0.0
            && self.contact_tol >= 0.0
            && self.goal_tol > 0.0
            && self.gripper_max_speed > 0.0
            && self.floor_friction >= 0.0
            && self.grasp_tol > 0.0
            && (1..=5).contains(&self.n_objects);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid world settings {self:?}")))
        }
    }

    pub fn layout(&self) -> FrameLayout {
        FrameLayout {
            n_objects: self.n_objects,
        }
    }
}

/// Index layout of a flattened state frame.
///
/// ```text
/// 0: gripper x   1: gripper y   2: gripper closed (0 or 1)
/// then per object j, starting at 3 + 5j:
///   x, y, vx, vy, shade
/// ```
///
/// `shade` is the object's appearance channel; it is constant in clean
/// simulation and only the visual-noise defect perturbs it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLayout {
    pub n_objects: usize,
}

impl FrameLayout {
    pub const GRIPPER_X: usize = 0;
    pub const GRIPPER_Y: usize = 1;
    pub const CLOSED: usize = 2;
    pub const OBJECT_STRIDE: usize = 5;

    pub fn for_dim(d: usize) -> Result<Self> {
        if d < 3 + Self::OBJECT_STRIDE || (d - 3) % Self::OBJECT_STRIDE != 0 {
            return Err(Error::Input(format!("frame width {d} matches no layout")));
        }
        Ok(FrameLayout {
            n_objects: (d - 3) / Self::OBJECT_STRIDE,
        })
    }

    pub fn dim(&self) -> usize {
        3 + Self::OBJECT_STRIDE * self.n_objects
    }

    pub fn obj(&self, j: usize) -> usize {
        3 + Self::OBJECT_STRIDE * j
    }

    pub fn pos(&self, frame: &[f64], j: usize) -> [f64; 2] {
        let b = self.obj(j);
        [frame[b], frame[b + 1]]
    }

    pub fn vel(&self, frame: &[f64], j: usize) -> [f64; 2] {
        let b = self.obj(j);
        [frame[b + 2], frame[b + 3]]
    }

    pub fn shade_index(&self, j: usize) -> usize {
        self.obj(j) + 4
    }

    pub fn gripper(&self, frame: &[f64]) -> [f64; 2] {
        [frame[Self::GRIPPER_X], frame[Self::GRIPPER_Y]]
    }

    pub fn closed(&self, frame: &[f64]) -> bool {
        frame[Self::CLOSED] > 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Reach,
    Pick,
    Place,
    Push,
    Stack,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Reach,
        TaskKind::Pick,
        TaskKind::Place,
        TaskKind::Push,
        TaskKind::Stack,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown task index {i}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    /// Object the task manipulates (ignored by `reach`).
    pub object: usize,
    /// Object to stack onto; required by `stack` only.
    pub support: Option<usize>,
    /// Goal position. For `stack` this is the top of the support at time zero.
    pub goal: [f64; 2],
}

/// Conditioning of a rollout: the initial state and the instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub id: u64,
    pub initial_frame: Vec<f64>,
    pub task: TaskKind,
    pub params: TaskParams,
    /// Radius of every object, in frame order.
    pub radii: Vec<f64>,
}

impl Condition {
    pub fn layout(&self) -> FrameLayout {
        FrameLayout {
            n_objects: self.radii.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.radii.len();
        if n == 0 || self.radii.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Config("object radii must be positive".into()));
        }
        if self.initial_frame.len() != self.layout().dim() {
            return Err(Error::Config(format!(
                "initial frame has {} entries, layout needs {}",
                self.initial_frame.len(),
                self.layout().dim()
            )));
        }
        if !self.initial_frame.iter().all(|x| x.is_finite())
            || !self.params.goal.iter().all(|x| x.is_finite())
        {
            return Err(Error::Config("condition contains non-finite values".into()));
        }
        if self.task != TaskKind::Reach && self.params.object >= n {
            return Err(Error::Config(format!(
                "task object index {} out of range for {n} objects",
                self.params.object
            )));
        }
        match (self.task, self.params.support) {
            (TaskKind::Stack, None) => {
                return Err(Error::Config("stack task needs a support object".into()))
            }
            (TaskKind::Stack, Some(s)) if s >= n || s == self.params.object => {
                return Err(Error::Config(format!("invalid support object {s}")))
            }
            (_, Some(s)) if s >= n => {
                return Err(Error::Config(format!("invalid support object {s}")))
            }
            _ => {}
        }
        Ok(())
    }

    /// Conditioning vector consumed by learned models:
    /// initial frame, task one-hot, goal, object one-hot, support one-hot.
    pub fn features(&self) -> Vec<f64> {
        let n = self.radii.len();
        let mut f = self.initial_frame.clone();
        let mut task = [0.0; 5];
        task[self.task.index()] = 1.0;
        f.extend_from_slice(&task);
        f.extend_from_slice(&self.params.goal);
        let mut obj = vec![0.0; n];
        if self.task != TaskKind::Reach {
            obj[self.params.object] = 1.0;
        }
        f.extend(obj);
        let mut sup = vec![0.0; n];
        if let Some(s) = self.params.support {
            sup[s] = 1.0;
        }
        f.extend(sup);
        f
    }

    pub fn feature_dim(n_objects: usize) -> usize {
        3 + 5 * n_objects + 5 + 2 + 2 * n_objects
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Draws a random scene and instruction. Objects rest on the floor, the
/// gripper starts open above them.
pub fn random_condition<R: Rng>(
    rng: &mut R,
    id: u64,
    task: Option<TaskKind>,
    cfg: &WorldConfig,
) -> Condition {
    let n = cfg.n_objects;
    let r = cfg.object_radius;
    let layout = cfg.layout();
    let mut xs: Vec<f64> = Vec::with_capacity(n);
    while xs.len() < n {
        let x = rng.gen_range(-0.7..0.7);
        if xs.iter().all(|&o: &f64| (o - x).abs() >= 0.4) {
            xs.push(x);
        } else if xs.len() >= 3 {
            // dense scenes: fall back to an evenly spaced row
            xs = (0..n)
                .map(|j| -0.7 + 1.4 * j as f64 / (n - 1).max(1) as f64)
                .collect();
        }
    }
    let mut frame = vec![0.0; layout.dim()];
    frame[FrameLayout::GRIPPER_X] = rng.gen_range(-0.8..0.8);
    frame[FrameLayout::GRIPPER_Y] = rng.gen_range(0.45..0.85);
    for (j, &x) in xs.iter().enumerate() {
        let b = layout.obj(j);
        frame[b] = x;
        frame[b + 1] = cfg.floor_y + r;
        frame[b + 4] = rng.gen_range(0.3..0.9);
    }
    let task = task.unwrap_or_else(|| TaskKind::ALL[rng.gen_range(0..5)]);
    let object = rng.gen_range(0..n);
    let other = if n > 1 { (object + 1) % n } else { object };
    let p = layout.pos(&frame, object);
    let po = layout.pos(&frame, other);
    let grip = layout.gripper(&frame);
    let (goal, support) = match task {
        TaskKind::Reach => {
            let mut g;
            loop {
                g = [rng.gen_range(-0.8..0.8), rng.gen_range(0.3..0.8)];
                if dist(g, grip) >= 0.3 {
                    break;
                }
            }
            (g, None)
        }
        TaskKind::Pick => (
            [
                (p[0] + rng.gen_range(-0.3..0.3)).clamp(-0.85, 0.85),
                rng.gen_range(0.45..0.75),
            ],
            None,
        ),
        TaskKind::Place => {
            let mut gx;
            let mut tries = 0;
            loop {
                gx = rng.gen_range(-0.8..0.8);
                tries += 1;
                let clear = n < 2 || (gx - po[0]).abs() >= 0.35;
                if (clear && (gx - p[0]).abs() >= 0.3) || tries > 100 {
                    break;
                }
            }
            ([gx, cfg.floor_y + r], None)
        }
        TaskKind::Push => {
            let dir = if n < 2 || p[0] >= po[0] { 1.0 } else { -1.0 };
            let d = rng.gen_range(0.2..0.45);
            ([(p[0] + dir * d).clamp(-0.9, 0.9), cfg.floor_y + r], None)
        }
        TaskKind::Stack => ([po[0], po[1] + 2.0 * r], Some(other)),
    };
    let task = if task == TaskKind::Stack && n < 2 {
        TaskKind::Place
    } else {
        task
    };
    Condition {
        id,
        initial_frame: frame,
        task,
        params: TaskParams {
            object,
            support: if task == TaskKind::Stack { support } else { None },
            goal,
        },
        radii: vec![r; n],
    }
}
