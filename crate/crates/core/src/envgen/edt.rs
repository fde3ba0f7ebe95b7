//! Exact Euclidean distance transform (lower envelope of parabolas, applied
//! separably along each axis).

use crate::grid::{GridSpec, OccupancyGrid, SdfGrid};

const INF: f64 = f64::INFINITY;

/// One-dimensional squared distance transform of a sampled function `f`
/// (`INF` marks non-feature samples). Writes the result into `d`.
fn dt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            d.fill(INF);
            return;
        }
    };
    let mut k = 0usize;
    v[0] = first;
    z[0] = -INF;
    z[1] = INF;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = INF;
                break;
            }
        }
    }
    let mut k = 0usize;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *out = diff * diff + f[p];
    }
}

/// Squared cell-unit distance from every cell to the nearest cell where
/// `feature` is true; `INF` when there is none.
pub(crate) fn squared_distance_transform(spec: &GridSpec, feature: impl Fn(usize) -> bool) -> Vec<f64> {
    let n = spec.cells;
    let len = spec.len();
    let mut grid: Vec<f64> = (0..len).map(|i| if feature(i) { 0.0 } else { INF }).collect();
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for axis in 0..spec.dim {
        let stride = n.pow((spec.dim - 1 - axis) as u32);
        for start in 0..len {
            // visit each line once, from its first element
            if (start / stride) % n != 0 {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = grid[start + i * stride];
            }
            dt_1d(&line, &mut out, &mut v, &mut z);
            for (i, o) in out.iter().enumerate() {
                grid[start + i * stride] = *o;
            }
        }
    }
    grid
}

/// Two-sided exact Euclidean distance transform between cell centers.
///
/// Free cells get the distance to the nearest occupied cell; occupied cells
/// get minus the distance to the nearest free cell. When one side has no
/// cells at all the distance saturates at the grid diagonal.
pub fn occupancy_to_sdf(grid: &OccupancyGrid) -> SdfGrid {
    let spec = grid.spec;
    let res = spec.resolution();
    let cap = spec.diagonal();
    let outside = squared_distance_transform(&spec, |i| grid.cells[i]);
    let inside = squared_distance_transform(&spec, |i| !grid.cells[i]);
    let values = grid
        .cells
        .iter()
        .enumerate()
        .map(|(i, &occ)| {
            if occ {
                -(inside[i].sqrt() * res).min(cap)
            } else {
                (outside[i].sqrt() * res).min(cap)
            }
        })
        .collect();
    SdfGrid { spec, values }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_feature_line() {
        let f = [INF, INF, 0.0, INF, INF];
        let mut d = [0.0; 5];
        let mut v = [0; 5];
        let mut z = [0.0; 6];
        dt_1d(&f, &mut d, &mut v, &mut z);
        assert_eq!(d, [4.0, 1.0, 0.0, 1.0, 4.0]);
    }

    #[test]
    fn no_feature_line() {
        let f = [INF; 3];
        let mut d = [0.0; 3];
        dt_1d(&f, &mut d, &mut [0; 3], &mut [0.0; 4]);
        assert!(d.iter().all(|x| x.is_infinite()));
    }
}
