use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, OccupancyGrid};

const MAX_GENERATION_ATTEMPTS: usize = 100;

/// Randomized disc (2D) or sphere (3D) obstacles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleParams {
    pub min_count: usize,
    pub max_count: usize,
    /// Radius range in meters.
    pub min_radius: f64,
    pub max_radius: f64,
}

impl ObstacleParams {
    pub fn planar() -> Self {
        ObstacleParams { min_count: 4, max_count: 10, min_radius: 0.2, max_radius: 0.5 }
    }

    pub fn quadrotor() -> Self {
        ObstacleParams { min_count: 8, max_count: 20, min_radius: 0.2, max_radius: 0.6 }
    }

    fn validate(&self) -> Result<()> {
        if self.min_count > self.max_count {
            return Err(Error::InvalidParams("obstacle min_count exceeds max_count".into()));
        }
        if !(self.min_radius >= 0.0 && self.min_radius <= self.max_radius && self.max_radius.is_finite()) {
            return Err(Error::InvalidParams("obstacle radius range is invalid".into()));
        }
        Ok(())
    }
}

impl Default for ObstacleParams {
    fn default() -> Self {
        Self::planar()
    }
}

/// Narrow passages through the walls of the four-rooms layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassageParams {
    /// Passage width range in meters.
    pub min_width: f64,
    pub max_width: f64,
    /// Wall thickness in cells.
    pub wall_thickness: usize,
}

impl Default for PassageParams {
    fn default() -> Self {
        PassageParams { min_width: 0.3, max_width: 0.6, wall_thickness: 2 }
    }
}

/// Rasterizes a random number of discs or spheres into an empty grid. A cell
/// is occupied when its center lies within an obstacle's radius.
pub fn gen_cluttered<R: Rng + ?Sized>(rng: &mut R, spec: GridSpec, params: &ObstacleParams) -> Result<OccupancyGrid> {
    params.validate()?;
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let count = rng.random_range(params.min_count..=params.max_count);
        let mut grid = OccupancyGrid::empty(spec);
        for _ in 0..count {
            let mut center = [0.0; 3];
            for (a, c) in center.iter_mut().enumerate().take(spec.dim) {
                *c = spec.origin[a] + rng.random::<f64>() * spec.extent;
            }
            let radius = if params.max_radius > params.min_radius {
                rng.random_range(params.min_radius..params.max_radius)
            } else {
                params.min_radius
            };
            rasterize_ball(&mut grid, &center, radius);
        }
        if grid.free_count() > 0 {
            return Ok(grid);
        }
    }
    Err(Error::Generation {
        attempts: MAX_GENERATION_ATTEMPTS,
        reason: "obstacles filled every cell".into(),
    })
}

pub(crate) fn rasterize_ball(grid: &mut OccupancyGrid, center: &[f64; 3], radius: f64) {
    let spec = grid.spec;
    let res = spec.resolution();
    let r2 = radius * radius;
    // restrict the scan to the ball's bounding box
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..spec.dim {
        let l = ((center[a] - radius - spec.origin[a]) / res - 0.5).floor().max(0.0) as usize;
        let h = ((center[a] + radius - spec.origin[a]) / res - 0.5).ceil();
        lo[a] = l.min(spec.cells);
        hi[a] = if h < 0.0 { 0 } else { (h as usize + 1).min(spec.cells) };
    }
    let mut idx = [0usize; 3];
    let depth = if spec.dim == 3 { (lo[2], hi[2]) } else { (0, 1) };
    for i in lo[0]..hi[0] {
        for j in lo[1]..hi[1] {
            for k in depth.0..depth.1 {
                idx[0] = i;
                idx[1] = j;
                idx[2] = k;
                let c = spec.cell_center(&idx[..spec.dim]);
                let d2: f64 = (0..spec.dim).map(|a| (c[a] - center[a]).powi(2)).sum();
                if d2 <= r2 {
                    grid.set(&idx[..spec.dim], true);
                }
            }
        }
    }
}

/// Four rooms separated by two full-length walls crossing at the grid
/// center. Each of the four wall segments (one per side of the crossing)
/// gets one randomly placed passage. In 3D the passage is a square window.
pub fn gen_rooms<R: Rng + ?Sized>(rng: &mut R, spec: GridSpec, params: &PassageParams) -> Result<OccupancyGrid> {
    if !(params.min_width > 0.0 && params.min_width <= params.max_width) {
        return Err(Error::InvalidParams("passage width range is invalid".into()));
    }
    let n = spec.cells;
    let t = params.wall_thickness;
    if t == 0 || t >= n {
        return Err(Error::InvalidParams(format!("wall thickness {t} does not fit a {n}-cell grid")));
    }
    let res = spec.resolution();
    let band_lo = n / 2 - t / 2;
    let band = band_lo..band_lo + t;
    let half = n / 2;

    // wall w (0: normal along x, 1: normal along y), segment s (0: low half, 1: high half)
    let mut gaps: [[Gap; 2]; 2] = Default::default();
    for wall in gaps.iter_mut() {
        for (s, gap) in wall.iter_mut().enumerate() {
            let seg = if s == 0 { 0..half } else { half..n };
            let width = rng.random_range(params.min_width..=params.max_width);
            let wanted = (width / res).round() as usize;
            let cells = wanted.clamp(1, seg.len());
            let start = seg.start + rng.random_range(0..=seg.len() - cells);
            gap.along = start..start + cells;
            if spec.dim == 3 {
                let tall = wanted.clamp(1, n);
                let zstart = rng.random_range(0..=n - tall);
                gap.vertical = zstart..zstart + tall;
            } else {
                gap.vertical = 0..1;
            }
        }
    }

    let mut grid = OccupancyGrid::empty(spec);
    for flat in 0..spec.len() {
        let idx = spec.unravel(flat);
        let z = if spec.dim == 3 { idx[2] } else { 0 };
        let mut occupied = false;
        for (wall, segments) in gaps.iter().enumerate() {
            let (normal, along) = if wall == 0 { (idx[0], idx[1]) } else { (idx[1], idx[0]) };
            if !band.contains(&normal) {
                continue;
            }
            let gap = &segments[usize::from(along >= half)];
            let open = gap.along.contains(&along) && gap.vertical.contains(&z);
            if !open {
                occupied = true;
            }
        }
        grid.cells[flat] = occupied;
    }
    Ok(grid)
}

#[derive(Debug, Clone, Default)]
struct Gap {
    along: std::ops::Range<usize>,
    vertical: std::ops::Range<usize>,
}
