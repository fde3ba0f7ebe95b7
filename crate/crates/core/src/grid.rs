//! Cubic occupancy and signed-distance grids.
//!
//! Cells are stored row-major over the axes `(x, y)` or `(x, y, z)`, so the
//! x index varies slowest. Cell `i` along an axis spans
//! `[origin + i * res, origin + (i + 1) * res)` and its value is sampled at
//! the cell center.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of generated environments in meters.
pub const DEFAULT_EXTENT: f64 = 4.0;
/// Cells per side of generated environments.
pub const DEFAULT_CELLS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Spatial dimensionality, 2 or 3.
    pub dim: usize,
    /// Cells per side.
    pub cells: usize,
    /// Physical side length in meters.
    pub extent: f64,
    /// Minimum corner in meters. Unused trailing components are zero.
    pub origin: [f64; 3],
}

impl GridSpec {
    pub fn new(dim: usize, cells: usize, extent: f64) -> Result<Self> {
        Self::with_origin(dim, cells, extent, [0.0; 3])
    }

    pub fn with_origin(dim: usize, cells: usize, extent: f64, origin: [f64; 3]) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidParams(format!("grid dimension must be 2 or 3, got {dim}")));
        }
        if cells == 0 {
            return Err(Error::InvalidParams("grid must have at least one cell per side".into()));
        }
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(Error::InvalidParams(format!("grid extent must be positive, got {extent}")));
        }
        Ok(GridSpec { dim, cells, extent, origin })
    }

    /// The 4 m, 64-cell grid used for generated environments.
    pub fn standard(dim: usize) -> Self {
        Self::new(dim, DEFAULT_CELLS, DEFAULT_EXTENT).expect("standard grid is valid")
    }

    pub fn resolution(&self) -> f64 {
        self.extent / self.cells as f64
    }

    pub fn len(&self) -> usize {
        self.cells.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Length of the grid diagonal, used as the distance cap.
    pub fn diagonal(&self) -> f64 {
        self.extent * (self.dim as f64).sqrt()
    }

    /// Shape as `[cells; dim]`.
    pub fn shape(&self) -> Vec<usize> {
        vec![self.cells; self.dim]
    }

    pub fn index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dim);
        idx.iter().fold(0, |acc, &i| acc * self.cells + i)
    }

    pub fn unravel(&self, mut flat: usize) -> [usize; 3] {
        let mut out = [0; 3];
        for axis in (0..self.dim).rev() {
            out[axis] = flat % self.cells;
            flat /= self.cells;
        }
        out
    }

    pub fn cell_center(&self, idx: &[usize]) -> [f64; 3] {
        let res = self.resolution();
        let mut p = [0.0; 3];
        for (axis, &i) in idx.iter().enumerate().take(self.dim) {
            p[axis] = self.origin[axis] + (i as f64 + 0.5) * res;
        }
        p
    }

    pub fn contains(&self, pos: &[f64]) -> bool {
        (0..self.dim).all(|a| {
            let lo = self.origin[a];
            pos[a] >= lo && pos[a] <= lo + self.extent
        })
    }

    /// Cell containing `pos`, or `None` outside the bounds.
    pub fn cell_of(&self, pos: &[f64]) -> Option<[usize; 3]> {
        let res = self.resolution();
        let mut idx = [0; 3];
        for a in 0..self.dim {
            let u = (pos[a] - self.origin[a]) / res;
            if !(u >= 0.0 && u < self.cells as f64) {
                return None;
            }
            idx[a] = u as usize;
        }
        Some(idx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    pub cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn empty(spec: GridSpec) -> Self {
        OccupancyGrid { spec, cells: vec![false; spec.len()] }
    }

    pub fn from_cells(spec: GridSpec, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != spec.len() {
            return Err(Error::Shape {
                expected: format!("{} cells", spec.len()),
                got: format!("{} cells", cells.len()),
            });
        }
        Ok(OccupancyGrid { spec, cells })
    }

    pub fn get(&self, idx: &[usize]) -> bool {
        self.cells[self.spec.index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], occupied: bool) {
        let i = self.spec.index(idx);
        self.cells[i] = occupied;
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn free_count(&self) -> usize {
        self.cells.len() - self.occupied_count()
    }
}

/// Signed distances in meters, negative inside obstacles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdfGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl SdfGrid {
    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::Shape {
                expected: format!("{} values", spec.len()),
                got: format!("{} values", values.len()),
            });
        }
        Ok(SdfGrid { spec, values })
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.values[self.spec.index(idx)]
    }

    /// Interpolated signed distance at a physical position (bilinear in 2D,
    /// trilinear in 3D, between cell centers; clamped at the outermost
    /// centers). Returns `None` outside the grid bounds.
    pub fn query(&self, pos: &[f64]) -> Option<f64> {
        let spec = &self.spec;
        if !spec.contains(pos) {
            return None;
        }
        let res = spec.resolution();
        let last = (spec.cells - 1) as f64;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..spec.dim {
            let u = ((pos[a] - spec.origin[a]) / res - 0.5).clamp(0.0, last);
            let i = (u.floor() as usize).min(spec.cells.saturating_sub(2));
            base[a] = i;
            frac[a] = if spec.cells == 1 { 0.0 } else { u - i as f64 };
        }
        let corners = 1usize << spec.dim;
        let mut acc = 0.0;
        for corner in 0..corners {
            let mut weight = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..spec.dim {
                let hi = (corner >> a) & 1 == 1;
                let step = usize::from(hi && spec.cells > 1);
                idx[a] = base[a] + step;
                weight *= if hi { frac[a] } else { 1.0 - frac[a] };
            }
            if weight != 0.0 {
                acc += weight * self.values[spec.index(&idx[..spec.dim])];
            }
        }
        Some(acc)
    }

    /// Values clamped to `[-clip, clip]` and divided by `clip`.
    pub fn normalized(&self, clip: f64) -> Vec<f64> {
        self.values.iter().map(|v| v.clamp(-clip, clip) / clip).collect()
    }
}
