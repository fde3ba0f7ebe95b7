//! Environment generation: occupancy grids, signed distance fields, start and
//! goal sampling, and point-cloud ingestion.

mod edt;
mod generate;
mod points;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{State, System};
use crate::error::{Error, Result};
use crate::grid::SdfGrid;

pub use edt::occupancy_to_sdf;
pub use generate::{gen_cluttered, gen_rooms, ObstacleParams, PassageParams};
pub use points::{ingest_points, read_points_ascii, read_points_binary, IngestReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Cluttered,
    Rooms,
    Ingested,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluttered" => Ok(EnvKind::Cluttered),
            "rooms" => Ok(EnvKind::Rooms),
            "ingested" => Ok(EnvKind::Ingested),
            other => Err(Error::InvalidParams(format!("unknown environment kind '{other}'"))),
        }
    }
}

/// Start/goal sampling constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSampling {
    /// Minimum start-goal separation in meters.
    pub min_separation: f64,
    /// Extra clearance beyond the collision threshold, in meters.
    pub clearance: f64,
    /// Standard deviation of each start velocity component.
    pub velocity_std: f64,
    pub max_attempts: usize,
}

impl Default for TaskSampling {
    fn default() -> Self {
        TaskSampling { min_separation: 4.0, clearance: 0.1, velocity_std: 0.5, max_attempts: 10_000 }
    }
}

/// Samples a collision-free start and goal at least `min_separation` apart.
///
/// Planar starts get velocities drawn from `N(0, velocity_std^2)`; quadrotor
/// starts get linear velocities from the same law with zero attitude and
/// body rates. Goals are at rest.
pub fn sample_start_goal<R: Rng + ?Sized>(
    sdf: &SdfGrid,
    rng: &mut R,
    system: System,
    sampling: &TaskSampling,
) -> Result<(State, State)> {
    let spec = sdf.spec;
    if spec.dim != system.space_dim() {
        return Err(Error::Shape {
            expected: format!("{}D environment", system.space_dim()),
            got: format!("{}D", spec.dim),
        });
    }
    let threshold = system.collision_threshold() + sampling.clearance;
    let free: Vec<usize> = (0..spec.len()).filter(|&i| sdf.values[i] > threshold).collect();
    let dim = spec.dim;
    let center = |flat: usize| spec.cell_center(&spec.unravel(flat)[..dim]);
    let dist = |a: &[f64; 3], b: &[f64; 3]| (0..dim).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();

    // cells far enough apart must exist before jittered sampling can succeed
    let diameter_ok = !free.is_empty() && {
        let first = center(free[0]);
        let far = free.iter().map(|&f| dist(&first, &center(f))).fold(0.0, f64::max);
        far * 2.0 >= sampling.min_separation
    };
    if !diameter_ok {
        return Err(Error::Infeasible(format!(
            "no free cells {} m apart with clearance {threshold:.3} m",
            sampling.min_separation
        )));
    }

    let res = spec.resolution();
    let jitter = |rng: &mut R, c: [f64; 3]| {
        let mut p = c;
        for v in p.iter_mut().take(dim) {
            *v += (rng.random::<f64>() - 0.5) * res;
        }
        p
    };
    let vel = Normal::new(0.0, sampling.velocity_std.max(0.0))
        .map_err(|e| Error::InvalidParams(format!("velocity std: {e}")))?;

    for _ in 0..sampling.max_attempts {
        let s_cell = free[rng.random_range(0..free.len())];
        let g_cell = free[rng.random_range(0..free.len())];
        let (s, g) = (jitter(rng, center(s_cell)), jitter(rng, center(g_cell)));
        if dist(&s, &g) < sampling.min_separation {
            continue;
        }
        let clear = |p: &[f64; 3]| sdf.query(&p[..dim]).is_some_and(|d| d > threshold);
        if !clear(&s) || !clear(&g) {
            continue;
        }
        let mut start = State::zeros(system);
        let mut goal = State::zeros(system);
        start.as_mut_slice()[..dim].copy_from_slice(&s[..dim]);
        goal.as_mut_slice()[..dim].copy_from_slice(&g[..dim]);
        let velocity_range = match system {
            System::Planar => 2..4,
            System::Quadrotor => 6..9,
        };
        for i in velocity_range {
            start.as_mut_slice()[i] = vel.sample(rng);
        }
        return Ok((start, goal));
    }
    Err(Error::Infeasible(format!(
        "no valid start/goal pair after {} attempts",
        sampling.max_attempts
    )))
}
