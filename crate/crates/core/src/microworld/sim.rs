use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

use super::scene::{Condition, FrameLayout, TaskKind, WorldConfig};
use super::{Provenance, Trajectory};

type V2 = [f64; 2];

fn sub(a: V2, b: V2) -> V2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn add(a: V2, b: V2) -> V2 {
    [a[0] + b[0], a[1] + b[1]]
}

fn scale(a: V2, s: f64) -> V2 {
    [a[0] * s, a[1] * s]
}

fn dot(a: V2, b: V2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm(a: V2) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub pos: V2,
    pub vel: V2,
    pub radius: f64,
    pub shade: f64,
}

/// Full simulator state. Frames expose everything except the gripper
/// velocity, the grasp bookkeeping, and the static scene constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper_pos: V2,
    pub gripper_vel: V2,
    pub gripper_closed: bool,
    pub held: Option<usize>,
    pub objects: Vec<Body>,
    pub goal_pos: V2,
    pub floor_y: f64,
}

impl WorldState {
    pub fn from_condition(cond: &Condition, cfg: &WorldConfig) -> Result<Self> {
        cond.validate()?;
        let layout = cond.layout();
        let f = &cond.initial_frame;
        let objects: Vec<Body> = (0..layout.n_objects)
            .map(|j| Body {
                pos: layout.pos(f, j),
                vel: layout.vel(f, j),
                radius: cond.radii[j],
                shade: f[layout.shade_index(j)],
            })
            .collect();
        let gripper_pos = layout.gripper(f);
        let gripper_closed = layout.closed(f);
        let held = if gripper_closed {
            objects.iter().position(|o| {
                let hold = [
                    gripper_pos[0],
                    gripper_pos[1] - cfg.gripper_radius - o.radius,
                ];
                norm(sub(o.pos, hold)) < cfg.grasp_tol
            })
        } else {
            None
        };
        Ok(WorldState {
            gripper_pos,
            gripper_vel: [0.0, 0.0],
            gripper_closed,
            held,
            objects,
            goal_pos: cond.params.goal,
            floor_y: cfg.floor_y,
        })
    }

    pub fn to_frame(&self) -> Vec<f64> {
        let layout = FrameLayout {
            n_objects: self.objects.len(),
        };
        let mut f = vec![0.0; layout.dim()];
        f[FrameLayout::GRIPPER_X] = self.gripper_pos[0];
        f[FrameLayout::GRIPPER_Y] = self.gripper_pos[1];
        f[FrameLayout::CLOSED] = if self.gripper_closed { 1.0 } else { 0.0 };
        for (j, o) in self.objects.iter().enumerate() {
            let b = layout.obj(j);
            f[b..b + 5].copy_from_slice(&[o.pos[0], o.pos[1], o.vel[0], o.vel[1], o.shade]);
        }
        f
    }

    /// Mechanical energy (unit masses) of the free objects.
    pub fn energy(&self, gravity: f64) -> f64 {
        self.objects
            .iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != self.held)
            .map(|(_, o)| 0.5 * dot(o.vel, o.vel) + gravity * (o.pos[1] - self.floor_y))
            .sum()
    }
}

/// One gripper command: where to be after the step and whether to be closed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Command {
    pub target: V2,
    pub closed: bool,
}

fn on_floor(o: &Body, floor_y: f64) -> bool {
    o.pos[1] - o.radius - floor_y <= 1e-9
}

/// Advances the world by one semi-implicit Euler step.
pub fn step(state: &mut WorldState, cmd: Command, cfg: &WorldConfig) {
    let dt = cfg.dt;
    let g = cfg.gravity;

    // Kinematic gripper with a speed limit.
    let mut v = scale(sub(cmd.target, state.gripper_pos), 1.0 / dt);
    let speed = norm(v);
    if speed > cfg.gripper_max_speed {
        v = scale(v, cfg.gripper_max_speed / speed);
    }
    state.gripper_vel = v;
    state.gripper_pos = add(state.gripper_pos, scale(v, dt));
    let closing = cmd.closed && !state.gripper_closed;
    state.gripper_closed = cmd.closed;
    if !cmd.closed {
        state.held = None;
    }
    let hold_point = |gp: V2, r: f64| [gp[0], gp[1] - cfg.gripper_radius - r];
    if closing && state.held.is_none() {
        state.held = state
            .objects
            .iter()
            .position(|o| norm(sub(o.pos, hold_point(state.gripper_pos, o.radius))) < cfg.grasp_tol);
    }

    let floor_y = state.floor_y;
    for (j, o) in state.objects.iter_mut().enumerate() {
        if Some(j) == state.held {
            o.pos = hold_point(state.gripper_pos, o.radius);
            o.vel = state.gripper_vel;
            continue;
        }
        if on_floor(o, floor_y) && o.vel[0] != 0.0 {
            let dv = cfg.floor_friction * g * dt;
            o.vel[0] = o.vel[0].signum() * (o.vel[0].abs() - dv).max(0.0);
        }
        o.vel[1] -= g * dt;
    }
    limit_approach(state, dt);
    for (j, o) in state.objects.iter_mut().enumerate() {
        if Some(j) != state.held {
            o.pos = add(o.pos, scale(o.vel, dt));
        }
    }

    resolve_contacts(state, cfg);
}

/// Velocity-level contact handling: approaching bodies may close at most the
/// current gap during this step. Impulses are perfectly inelastic, so the
/// pass never adds kinetic energy.
fn limit_approach(state: &mut WorldState, dt: f64) {
    let n = state.objects.len();
    let floor_y = state.floor_y;
    for _ in 0..4 {
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (&state.objects[i], &state.objects[j]);
                let d = sub(b.pos, a.pos);
                let dist = norm(d);
                if dist < 1e-12 {
                    continue;
                }
                let nrm = scale(d, 1.0 / dist);
                let gap = (dist - a.radius - b.radius).max(0.0);
                let u = dot(sub(b.vel, a.vel), nrm);
                let allowed = -gap / dt;
                if u >= allowed {
                    continue;
                }
                let static_a = Some(i) == state.held || (on_floor(a, floor_y) && nrm[1] > 0.0);
                let static_b = Some(j) == state.held || (on_floor(b, floor_y) && nrm[1] < 0.0);
                let (wa, wb) = match (static_a, static_b) {
                    (true, true) => continue,
                    (true, false) => (0.0, 1.0),
                    (false, true) => (1.0, 0.0),
                    (false, false) => (0.5, 0.5),
                };
                let imp = allowed - u;
                let a = &mut state.objects[i];
                a.vel = sub(a.vel, scale(nrm, imp * wa));
                let b = &mut state.objects[j];
                b.vel = add(b.vel, scale(nrm, imp * wb));
            }
        }
        for (j, o) in state.objects.iter_mut().enumerate() {
            if Some(j) == state.held {
                continue;
            }
            let gap = (o.pos[1] - o.radius - floor_y).max(0.0);
            if o.vel[1] < -gap / dt {
                o.vel[1] = -gap / dt;
            }
        }
    }
}

fn resolve_contacts(state: &mut WorldState, cfg: &WorldConfig) {
    let n = state.objects.len();
    let floor_y = state.floor_y;
    for _ in 0..6 {
        // gripper against free objects
        for j in 0..n {
            if Some(j) == state.held {
                continue;
            }
            let o = &mut state.objects[j];
            let d = sub(o.pos, state.gripper_pos);
            let dist = norm(d);
            let min = cfg.gripper_radius + o.radius;
            if dist < min {
                let nrm = if dist > 1e-12 { scale(d, 1.0 / dist) } else { [0.0, 1.0] };
                o.pos = add(state.gripper_pos, scale(nrm, min));
                let vn = dot(o.vel, nrm);
                let gn = dot(state.gripper_vel, nrm);
                if vn < gn {
                    o.vel = add(o.vel, scale(nrm, gn - vn));
                }
            }
        }
        // object pairs
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (&state.objects[i], &state.objects[j]);
                let d = sub(b.pos, a.pos);
                let dist = norm(d);
                let min = a.radius + b.radius;
                if dist >= min {
                    continue;
                }
                let nrm = if dist > 1e-12 { scale(d, 1.0 / dist) } else { [0.0, 1.0] };
                // Mobility along the separating direction; held objects and
                // objects pressed into the floor do not yield.
                let mob = |k: usize, o: &Body, sign: f64| -> f64 {
                    if Some(k) == state.held || (on_floor(o, floor_y) && sign * nrm[1] < 0.0) {
                        0.0
                    } else {
                        1.0
                    }
                };
                let (ma, mb) = (mob(i, a, -1.0), mob(j, b, 1.0));
                if ma + mb == 0.0 {
                    continue;
                }
                let overlap = min - dist;
                let (wa, wb) = (ma / (ma + mb), mb / (ma + mb));
                let (va, vb) = (dot(a.vel, nrm), dot(b.vel, nrm));
                let pa = sub(a.pos, scale(nrm, overlap * wa));
                let pb = add(b.pos, scale(nrm, overlap * wb));
                // Restitution 0: approaching bodies end with a common normal velocity.
                let common = if vb < va {
                    Some(if ma == 0.0 {
                        va
                    } else if mb == 0.0 {
                        vb
                    } else {
                        0.5 * (va + vb)
                    })
                } else {
                    None
                };
                let a = &mut state.objects[i];
                a.pos = pa;
                if let Some(c) = common {
                    a.vel = add(a.vel, scale(nrm, c - va));
                }
                let b = &mut state.objects[j];
                b.pos = pb;
                if let Some(c) = common {
                    b.vel = add(b.vel, scale(nrm, c - vb));
                }
            }
        }
        // floor
        for (j, o) in state.objects.iter_mut().enumerate() {
            if Some(j) == state.held {
                continue;
            }
            let min_y = floor_y + o.radius;
            if o.pos[1] < min_y {
                o.pos[1] = min_y;
                if o.vel[1] < 0.0 {
                    o.vel[1] = 0.0;
                }
            }
        }
    }
}

fn min_jerk(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    /// Smooth move to `to` along a vertical arc of at least `arc` height.
    Move(Move),
    /// Hold position for one step while opening or closing.
    Toggle { closed: bool },
}

#[derive(Debug, Clone, Copy)]
struct Move {
    to: V2,
    arc: f64,
    /// Object carried by the gripper during the move.
    carried: Option<usize>,
    /// Object the move ends in contact with.
    touch: Option<usize>,
    /// Pushing moves keep a straight path and a bounded deceleration.
    push: bool,
}

impl Move {
    fn free(to: V2, arc: f64) -> Self {
        Move {
            to,
            arc,
            carried: None,
            touch: None,
            push: false,
        }
    }
}

fn arc_point(from: V2, to: V2, arc: f64, s: f64) -> V2 {
    add(add(from, scale(sub(to, from), s)), [0.0, arc * (std::f64::consts::PI * s).sin()])
}

/// Whether the swept gripper (and carried object) clears every other object.
fn arc_is_clear(cond: &Condition, cfg: &WorldConfig, from: V2, to: V2, mv: &Move) -> bool {
    let layout = cond.layout();
    let f = &cond.initial_frame;
    let mut probes = vec![(0.0, cfg.gripper_radius)];
    if let Some(c) = mv.carried {
        probes.push((cfg.gripper_radius + cond.radii[c], cond.radii[c]));
    }
    for k in 1..50 {
        let s = k as f64 / 50.0;
        let p = arc_point(from, to, mv.arc, s);
        for &(drop, r) in &probes {
            let body = [p[0], p[1] - drop];
            if body[1] - r < cfg.floor_y - 1e-9 {
                return false;
            }
            for i in 0..layout.n_objects {
                if Some(i) == mv.carried {
                    continue;
                }
                let margin = if Some(i) == mv.touch { -1e-3 } else { 0.03 };
                if norm(sub(body, layout.pos(f, i))) < r + cond.radii[i] + margin {
                    return false;
                }
            }
        }
    }
    true
}

/// Scripted controller for a condition. `target_override` replaces the point
/// the manipulated entity should end at.
pub(crate) fn plan<R: Rng>(
    cond: &Condition,
    horizon: usize,
    cfg: &WorldConfig,
    rng: &mut R,
    target_override: Option<V2>,
) -> Vec<Command> {
    let layout = cond.layout();
    let f = &cond.initial_frame;
    let start = layout.gripper(f);
    let start_closed = layout.closed(f);
    let j = cond.params.object;
    let rj = cond.radii.get(j).copied().unwrap_or(cfg.object_radius);
    let hold = cfg.gripper_radius + rj;
    let arc = 0.2 + rng.gen_range(-0.03..0.03);
    let goal = target_override.unwrap_or(cond.params.goal);
    let grasp = |p: V2| [p[0], p[1] + hold];
    let approach = |p: V2| Move {
        to: grasp(p),
        arc,
        carried: None,
        touch: Some(j),
        push: false,
    };
    let carry = |to: V2, arc: f64, touch: Option<usize>| Move {
        to,
        arc,
        carried: Some(j),
        touch,
        push: false,
    };

    let mut stages: Vec<Stage> = match cond.task {
        TaskKind::Reach => vec![Stage::Move(Move::free(goal, 0.0))],
        TaskKind::Pick => vec![
            Stage::Move(approach(layout.pos(f, j))),
            Stage::Toggle { closed: true },
            Stage::Move(carry(grasp(goal), 0.0, None)),
        ],
        TaskKind::Place => vec![
            Stage::Move(approach(layout.pos(f, j))),
            Stage::Toggle { closed: true },
            Stage::Move(carry(grasp(goal), arc, None)),
            Stage::Toggle { closed: false },
        ],
        TaskKind::Push => {
            let p = layout.pos(f, j);
            let dir = if goal[0] >= p[0] { 1.0 } else { -1.0 };
            let gap = hold + 0.005;
            let mut pre = Move::free([p[0] - dir * gap, p[1]], arc + 0.1);
            pre.touch = Some(j);
            vec![
                Stage::Move(pre),
                Stage::Move(Move {
                    to: [goal[0] - dir * gap, p[1]],
                    arc: 0.0,
                    carried: None,
                    touch: Some(j),
                    push: true,
                }),
            ]
        }
        TaskKind::Stack => {
            let s = cond.params.support.unwrap_or(0);
            // Release with a small clearance above the support.
            let top = match target_override {
                Some(t) => t,
                None => {
                    let ps = layout.pos(f, s);
                    [ps[0], ps[1] + cond.radii[s] + rj]
                }
            };
            vec![
                Stage::Move(approach(layout.pos(f, j))),
                Stage::Toggle { closed: true },
                Stage::Move(carry(grasp([top[0], top[1] + 0.002]), arc, Some(s))),
                Stage::Toggle { closed: false },
            ]
        }
    };

    // Raise arcs until the swept path clears the scene.
    let mut cursor = start;
    for st in stages.iter_mut() {
        if let Stage::Move(mv) = st {
            if !mv.push {
                let base = mv.arc;
                for k in 0..60 {
                    mv.arc = base + 0.02 * k as f64;
                    if arc_is_clear(cond, cfg, cursor, mv.to, mv) {
                        break;
                    }
                }
            }
            cursor = mv.to;
        }
    }

    let total = horizon.saturating_sub(1);
    let toggles = stages
        .iter()
        .filter(|s| matches!(s, Stage::Toggle { .. }))
        .count();
    let settle = 2 + rng.gen_range(0..2usize);
    let motion = total.saturating_sub(toggles + settle);

    // Minimum step counts keep pushes below the friction deceleration; the
    // remaining steps are split by path length.
    let mut cursor = start;
    let mut lengths = Vec::new();
    let mut minimum = Vec::new();
    for s in &stages {
        if let Stage::Move(mv) = s {
            let d = norm(sub(mv.to, cursor));
            lengths.push(d + 1.5 * mv.arc + 0.1);
            let min_steps = if mv.push {
                let decel = 0.7 * cfg.floor_friction * cfg.gravity;
                ((5.77 * d / decel.max(1e-9)).sqrt() / cfg.dt).ceil() as usize
            } else {
                1
            };
            minimum.push(min_steps.max(1));
            cursor = mv.to;
        }
    }
    let min_sum: usize = minimum.iter().sum();
    let mut steps: Vec<usize> = if min_sum >= motion {
        minimum
            .iter()
            .map(|&m| ((m * motion) as f64 / min_sum as f64).floor() as usize)
            .collect()
    } else {
        let spare = (motion - min_sum) as f64;
        let sum_len: f64 = lengths.iter().sum();
        minimum
            .iter()
            .zip(&lengths)
            .map(|(&m, l)| m + (spare * l / sum_len).floor() as usize)
            .collect()
    };
    let assigned: usize = steps.iter().sum();
    if let Some(last) = steps.last_mut() {
        *last += motion.saturating_sub(assigned);
    }
    for s in steps.iter_mut() {
        *s = (*s).max(1);
    }

    let mut cmds = Vec::with_capacity(total);
    let mut pos = start;
    let mut closed = start_closed;
    let mut move_idx = 0;
    for s in &stages {
        match *s {
            Stage::Toggle { closed: c } => {
                closed = c;
                cmds.push(Command { target: pos, closed });
            }
            Stage::Move(mv) => {
                let n = steps[move_idx];
                move_idx += 1;
                let from = pos;
                for i in 1..=n {
                    let sv = min_jerk(i as f64 / n as f64);
                    cmds.push(Command {
                        target: arc_point(from, mv.to, mv.arc, sv),
                        closed,
                    });
                }
                pos = mv.to;
            }
        }
    }
    cmds.truncate(total);
    while cmds.len() < total {
        cmds.push(Command { target: pos, closed });
    }
    cmds
}

pub(crate) fn run(
    cond: &Condition,
    horizon: usize,
    sim_seed: u64,
    cfg: &WorldConfig,
    target_override: Option<V2>,
) -> Result<Vec<f64>> {
    if horizon < 2 {
        return Err(Error::Config(format!("horizon must be at least 2, got {horizon}")));
    }
    cfg.validate()?;
    let mut state = WorldState::from_condition(cond, cfg)?;
    let mut rng = seed::rng(sim_seed, &[seed::stream::SIMULATE]);
    let cmds = plan(cond, horizon, cfg, &mut rng, target_override);
    let d = cond.layout().dim();
    let mut data = Vec::with_capacity(horizon * d);
    data.extend_from_slice(&cond.initial_frame);
    for cmd in cmds {
        step(&mut state, cmd, cfg);
        data.extend(state.to_frame());
    }
    Ok(data)
}

/// Simulates the scripted controller for `condition` and returns a clean rollout
/// of `horizon` frames, the first of which is the initial frame.
pub fn simulate(condition: &Condition, horizon: usize, sim_seed: u64, cfg: &WorldConfig) -> Result<Trajectory> {
    let data = run(condition, horizon, sim_seed, cfg, None)?;
    Trajectory::new(data, horizon, condition.clone(), Provenance::Clean, sim_seed)
}
