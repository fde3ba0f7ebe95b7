//! Minimal f64 layer kit with explicit backward passes.
//!
//! Layers keep their parameter gradients next to the values. A forward pass
//! that needs gradients returns a tape; `backward` consumes the tape and an
//! upstream gradient, accumulates into the parameter gradients and returns
//! the gradient with respect to the layer input.

mod adam;
mod conv;
mod linear;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamState};
pub use conv::{Conv, ConvTranspose, Geometry};
pub use linear::{Linear, Mlp, MlpTape};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Repeats a single row `n` times.
    pub fn broadcast_row(row: &[f64], n: usize) -> Self {
        let mut data = Vec::with_capacity(row.len() * n);
        for _ in 0..n {
            data.extend_from_slice(row);
        }
        Mat { rows: n, cols: row.len(), data }
    }

    /// Sums the rows into one vector.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "hcat row count");
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Mat { rows: self.rows, cols, data }
    }

    /// Splits columns at `at` into `(left, right)`.
    pub fn hsplit(&self, at: usize) -> (Mat, Mat) {
        let mut left = Mat::zeros(self.rows, at);
        let mut right = Mat::zeros(self.rows, self.cols - at);
        for r in 0..self.rows {
            let row = self.row(r);
            left.row_mut(r).copy_from_slice(&row[..at]);
            right.row_mut(r).copy_from_slice(&row[at..]);
        }
        (left, right)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &Mat, trans_a: bool, b: &Mat, trans_b: bool, beta: f64, c: &mut Mat) {
    let (m, k, rsa, csa) = if trans_a { (a.cols, a.rows, 1, a.cols) } else { (a.rows, a.cols, a.cols, 1) };
    let (kb, n, rsb, csb) = if trans_b { (b.cols, b.rows, 1, b.cols) } else { (b.rows, b.cols, b.cols, 1) };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.data.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the shapes and strides above describe in-bounds views of the
    // three buffers, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Param { value, grad }
    }

    pub fn zeros(len: usize) -> Self {
        Param::new(vec![0.0; len])
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(len: usize, bound: f64, rng: &mut R) -> Self {
        Param::new((0..len).map(|_| rng.random_range(-bound..=bound)).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        } else {
            self.grad.fill(0.0);
        }
    }

    pub(crate) fn ensure_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
    }
}

/// Anything that owns trainable parameters. Visit order must be stable:
/// optimizers and checkpoints rely on it.
pub trait Parameterized {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    /// All parameter values concatenated in visit order.
    fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |p| out.extend_from_slice(&p.value));
        out
    }

    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |p| {
            if p.grad.len() == p.len() {
                out.extend_from_slice(&p.grad);
            } else {
                out.extend(std::iter::repeat_n(0.0, p.len()));
            }
        });
        out
    }

    /// Overwrites parameter values from a flat buffer in visit order.
    fn load_flat(&mut self, values: &[f64]) -> Result<(), String> {
        let expected = self.param_count();
        if values.len() != expected {
            return Err(format!("expected {expected} parameters, got {}", values.len()));
        }
        let mut offset = 0;
        self.visit_params_mut(&mut |p| {
            let n = p.len();
            p.value.copy_from_slice(&values[offset..offset + n]);
            p.ensure_grad();
            offset += n;
        });
        Ok(())
    }
}

pub fn relu_inplace(m: &mut Mat) {
    for v in m.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Adds independent uniform noise in `[-scale, scale]` to every parameter.
pub fn jitter_params<M: Parameterized + ?Sized, R: Rng + ?Sized>(model: &mut M, scale: f64, rng: &mut R) {
    model.visit_params_mut(&mut |p| {
        for v in p.value.iter_mut() {
            *v += rng.random_range(-scale..=scale);
        }
    });
}

/// Central finite-difference gradient of a scalar function.
#[doc(hidden)]
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let mut c = Mat::zeros(2, 2);
        gemm(1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c.data, vec![4.0, 5.0, 10.0, 11.0]);

        let mut c = Mat::zeros(3, 3);
        gemm(1.0, &a, true, &a, false, 0.0, &mut c);
        assert_eq!(c.data, vec![17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);

        let mut c = Mat::zeros(2, 2);
        gemm(1.0, &a, false, &a, true, 0.0, &mut c);
        assert_eq!(c.data, vec![14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn hcat_and_split_invert() {
        let a = Mat::from_vec(2, 1, vec![1.0, 2.0]);
        let b = Mat::from_vec(2, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let c = a.hcat(&b);
        assert_eq!(c.data, vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let (l, r) = c.hsplit(1);
        assert_eq!((l, r), (a, b));
    }
}
