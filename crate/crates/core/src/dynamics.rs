//! Discrete-time dynamics for the planar double integrator and the 12-state
//! quadrotor, trajectory rollout, collision checks and the trajectory cost.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SdfGrid;

/// Control horizon used by every controller.
pub const HORIZON: usize = 40;

pub const PLANAR_DT: f64 = 0.05;
pub const PLANAR_DAMPING: f64 = 0.95;

pub const QUAD_DT: f64 = 0.025;
pub const QUAD_MASS: f64 = 1.0;
pub const QUAD_IX: f64 = 0.5;
pub const QUAD_IY: f64 = 0.1;
pub const QUAD_IZ: f64 = 0.3;
pub const QUAD_K: f64 = 5.0;
pub const QUAD_G: f64 = -9.81;
pub const QUAD_RADIUS: f64 = 0.1;
pub const QUAD_HEIGHT: f64 = 0.05;
/// Pitch closer than this to +-pi/2 is rejected.
pub const GIMBAL_EPS: f64 = 1e-3;

/// Thrust that holds the quadrotor at rest: `-m g / K`.
pub const QUAD_HOVER_THRUST: f64 = -QUAD_MASS * QUAD_G / QUAD_K;

/// Radius of the sphere bounding the quadrotor cylinder.
pub fn quad_bounding_radius() -> f64 {
    (QUAD_RADIUS * QUAD_RADIUS + (QUAD_HEIGHT / 2.0).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Planar,
    Quadrotor,
}

impl System {
    pub fn state_dim(self) -> usize {
        match self {
            System::Planar => 4,
            System::Quadrotor => 12,
        }
    }

    pub fn control_dim(self) -> usize {
        match self {
            System::Planar => 2,
            System::Quadrotor => 4,
        }
    }

    /// Spatial dimension of the environment the system lives in.
    pub fn space_dim(self) -> usize {
        match self {
            System::Planar => 2,
            System::Quadrotor => 3,
        }
    }

    pub fn dt(self) -> f64 {
        match self {
            System::Planar => PLANAR_DT,
            System::Quadrotor => QUAD_DT,
        }
    }

    /// Signed distance at or below which a state is in collision.
    pub fn collision_threshold(self) -> f64 {
        match self {
            System::Planar => 0.0,
            System::Quadrotor => quad_bounding_radius(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            System::Planar => "planar",
            System::Quadrotor => "quadrotor",
        }
    }
}

impl std::str::FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planar" => Ok(System::Planar),
            "quadrotor" => Ok(System::Quadrotor),
            other => Err(Error::InvalidParams(format!("unknown system '{other}'"))),
        }
    }
}

/// Fixed-capacity state vector; only the first `system.state_dim()` entries
/// are meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub system: System,
    v: [f64; 12],
}

impl State {
    pub fn zeros(system: System) -> Self {
        State { system, v: [0.0; 12] }
    }

    pub fn from_slice(system: System, values: &[f64]) -> Result<Self> {
        if values.len() != system.state_dim() {
            return Err(Error::Shape {
                expected: format!("{} state entries", system.state_dim()),
                got: format!("{}", values.len()),
            });
        }
        let mut s = State::zeros(system);
        s.v[..values.len()].copy_from_slice(values);
        Ok(s)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v[..self.system.state_dim()]
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        let d = self.system.state_dim();
        &mut self.v[..d]
    }

    pub fn position(&self) -> &[f64] {
        &self.v[..self.system.space_dim()]
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|x| x.is_finite())
    }
}

/// A `T x d_u` control sequence stored row-major (one row per timestep).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSeq {
    pub horizon: usize,
    pub control_dim: usize,
    pub data: Vec<f64>,
}

impl ControlSeq {
    pub fn zeros(horizon: usize, control_dim: usize) -> Self {
        ControlSeq { horizon, control_dim, data: vec![0.0; horizon * control_dim] }
    }

    pub fn from_vec(horizon: usize, control_dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != horizon * control_dim {
            return Err(Error::Shape {
                expected: format!("{horizon}x{control_dim} controls"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(ControlSeq { horizon, control_dim, data })
    }

    pub fn control(&self, t: usize) -> &[f64] {
        &self.data[t * self.control_dim..(t + 1) * self.control_dim]
    }

    pub fn control_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.control_dim..(t + 1) * self.control_dim]
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|u| u * u).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &State {
        self.states.last().expect("trajectory has at least the start state")
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    // maps -pi to +pi so the range is (-pi, pi]
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Planar double integrator with velocity damping.
pub fn step_planar(x: &[f64], u: &[f64], dt: f64, out: &mut [f64]) {
    out[0] = x[0] + dt * x[2];
    out[1] = x[1] + dt * x[3];
    out[2] = PLANAR_DAMPING * x[2] + dt * u[0];
    out[3] = PLANAR_DAMPING * x[3] + dt * u[1];
}

/// Explicit Euler step of the quadrotor vector field. State layout is
/// `(x, y, z, roll p, pitch q, yaw r, vx, vy, vz, p_dot, q_dot, r_dot)`.
pub fn step_quadrotor(x: &[f64], u: &[f64], dt: f64, out: &mut [f64]) -> Result<()> {
    let (p, q, r) = (x[3], x[4], x[5]);
    if (q.abs() - PI / 2.0).abs() < GIMBAL_EPS {
        return Err(Error::GimbalLock { pitch: q, eps: GIMBAL_EPS });
    }
    let (pd, qd, rd) = (x[9], x[10], x[11]);
    let (sp, cp) = p.sin_cos();
    let (sq, cq) = q.sin_cos();
    let (sr, cr) = r.sin_cos();
    let tq = sq / cq;
    let thrust = QUAD_K * u[0] / QUAD_MASS;

    let f = [
        x[6],
        x[7],
        x[8],
        pd + qd * sp * tq + rd * cp * tq,
        qd * cp - rd * sp,
        qd * sp / cq + rd * cp / cq,
        -(sp * sr + cr * cp * sq) * thrust,
        -(cr * sp - cp * sr * sq) * thrust,
        QUAD_G + cp * cq * thrust,
        ((QUAD_IY - QUAD_IZ) * qd * rd + QUAD_K * u[1]) / QUAD_IX,
        ((QUAD_IZ - QUAD_IX) * pd * rd + QUAD_K * u[2]) / QUAD_IY,
        ((QUAD_IX - QUAD_IY) * pd * qd + QUAD_K * u[3]) / QUAD_IZ,
    ];
    for i in 0..12 {
        out[i] = x[i] + dt * f[i];
    }
    for angle in &mut out[3..6] {
        *angle = wrap_angle(*angle);
    }
    Ok(())
}

pub fn step(system: System, x: &State, u: &[f64]) -> Result<State> {
    let mut next = State::zeros(system);
    step_into(system, x.as_slice(), u, next.as_mut_slice())?;
    Ok(next)
}

fn step_into(system: System, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
    match system {
        System::Planar => {
            step_planar(x, u, PLANAR_DT, out);
            Ok(())
        }
        System::Quadrotor => step_quadrotor(x, u, QUAD_DT, out),
    }
}

/// Rolls `controls` out from `x0`; the result holds `T + 1` states.
pub fn rollout(system: System, x0: &State, controls: &ControlSeq) -> Result<Trajectory> {
    if controls.control_dim != system.control_dim() {
        return Err(Error::Shape {
            expected: format!("control dim {}", system.control_dim()),
            got: format!("{}", controls.control_dim),
        });
    }
    let mut states = Vec::with_capacity(controls.horizon + 1);
    states.push(*x0);
    for t in 0..controls.horizon {
        let next = step(system, states.last().unwrap(), controls.control(t))?;
        states.push(next);
    }
    Ok(Trajectory { states })
}

/// Collision test against the SDF. Positions outside the grid collide.
pub fn in_collision(sdf: &SdfGrid, x: &State) -> bool {
    match sdf.query(x.position()) {
        Some(d) => d <= x.system.collision_threshold(),
        None => true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub terminal_weight: f64,
    pub running_weight: f64,
    pub collision_weight: f64,
    /// Standard deviation of the Gaussian control prior.
    pub control_sigma: f64,
    /// Radius of the goal region measured with `goal_distance`.
    pub goal_radius: f64,
}

impl CostParams {
    pub fn for_system(system: System) -> Self {
        let (control_sigma, goal_radius) = match system {
            System::Planar => (1.0, 0.1),
            System::Quadrotor => (4.0, 0.3),
        };
        CostParams {
            terminal_weight: 100.0,
            running_weight: 10.0,
            collision_weight: 10000.0,
            control_sigma,
            goal_radius,
        }
    }

    pub fn control_weight(&self) -> f64 {
        0.5 / (self.control_sigma * self.control_sigma)
    }
}

/// Distance-to-goal. Planar: full-state Euclidean distance. Quadrotor:
/// position distance plus 0.01 times the angular-rate norm.
pub fn goal_distance(x: &State, goal: &State) -> f64 {
    let (a, g) = (x.as_slice(), goal.as_slice());
    match x.system {
        System::Planar => a.iter().zip(g).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt(),
        System::Quadrotor => {
            let pos = (0..3).map(|i| (a[i] - g[i]).powi(2)).sum::<f64>().sqrt();
            let rates = a[9..12].iter().map(|w| w * w).sum::<f64>().sqrt();
            pos + 0.01 * rates
        }
    }
}

/// The planning problem: environment, start and goal.
#[derive(Debug, Clone)]
pub struct Task {
    pub system: System,
    pub sdf: std::sync::Arc<SdfGrid>,
    pub start: State,
    pub goal: State,
}

impl Task {
    pub fn in_goal(&self, x: &State, params: &CostParams) -> bool {
        goal_distance(x, &self.goal) < params.goal_radius
    }
}

/// Trajectory cost: terminal and running goal distance, a collision
/// indicator per state, and the control prior `||u||^2 / (2 sigma^2)`.
pub fn trajectory_cost(traj: &Trajectory, controls: &ControlSeq, task: &Task, params: &CostParams) -> f64 {
    let horizon = traj.len() - 1;
    let mut cost = params.control_weight() * controls.squared_norm();
    for (t, x) in traj.states.iter().enumerate().skip(1) {
        let d = goal_distance(x, &task.goal);
        cost += if t == horizon { params.terminal_weight * d } else { params.running_weight * d };
        if in_collision(&task.sdf, x) {
            cost += params.collision_weight;
        }
    }
    cost
}

/// Rolls out and costs a control sequence without materializing the
/// trajectory. A dynamics failure (gimbal singularity) yields `None`.
pub fn rollout_cost(task: &Task, x0: &State, controls: &[f64], params: &CostParams) -> Option<f64> {
    let system = task.system;
    let du = system.control_dim();
    let horizon = controls.len() / du;
    let mut x = *x0;
    let mut next = State::zeros(system);
    let mut cost = params.control_weight() * controls.iter().map(|u| u * u).sum::<f64>();
    for t in 0..horizon {
        step_into(system, x.as_slice(), &controls[t * du..(t + 1) * du], next.as_mut_slice()).ok()?;
        std::mem::swap(&mut x, &mut next);
        let d = goal_distance(&x, &task.goal);
        cost += if t + 1 == horizon { params.terminal_weight * d } else { params.running_weight * d };
        if in_collision(&task.sdf, &x) {
            cost += params.collision_weight;
        }
    }
    cost.is_finite().then_some(cost)
}

/// Costs of `n` control sequences stored back to back in `flat`, each of
/// length `seq_len`. Failed rollouts cost `+inf`. Evaluated in parallel,
/// returned in input order.
pub fn rollout_costs(task: &Task, x0: &State, flat: &[f64], seq_len: usize, params: &CostParams) -> Vec<f64> {
    use rayon::prelude::*;
    flat.par_chunks(seq_len)
        .map(|u| rollout_cost(task, x0, u, params).unwrap_or(f64::INFINITY))
        .collect()
}
