#![allow(dead_code)]

use flowmpc::nn::Mat;
use rand::Rng;

/// log|det| by Gaussian elimination with partial pivoting.
pub fn log_abs_det(m: &Mat) -> f64 {
    let n = m.rows;
    let mut a = m.data.clone();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs())).unwrap();
        if a[p * n + c] == 0.0 {
            return f64::NEG_INFINITY;
        }
        if p != c {
            for k in 0..n {
                a.swap(p * n + k, c * n + k);
            }
        }
        let piv = a[c * n + c];
        acc += piv.abs().ln();
        for r in c + 1..n {
            let f = a[r * n + c] / piv;
            for k in c..n {
                a[r * n + k] -= f * a[c * n + k];
            }
        }
    }
    acc
}

/// Relative error with a floor on the denominator so that vanishing
/// gradients are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

pub fn random_mat<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
