//! Bijective layers. Each layer has a generative map (latent side to data
//! side) and a density map (data side to latent side). Gradients are only
//! needed through the density map, so only that direction is taped.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Mat, Mlp, MlpTape, Param, Parameterized};

fn gather(m: &Mat, idx: &[usize]) -> Mat {
    let mut out = Mat::zeros(m.rows, idx.len());
    for r in 0..m.rows {
        let src = m.row(r);
        for (o, &i) in out.row_mut(r).iter_mut().zip(idx) {
            *o = src[i];
        }
    }
    out
}

fn scatter(dst: &mut Mat, src: &Mat, idx: &[usize]) {
    for r in 0..dst.rows {
        let s = src.row(r).to_vec();
        let d = dst.row_mut(r);
        for (v, &i) in s.iter().zip(idx) {
            d[i] = *v;
        }
    }
}

/// Affine coupling: one half of the coordinates is scaled and shifted by
/// functions of the other half and the context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub kept: Vec<usize>,
    pub transformed: Vec<usize>,
    pub context_dim: usize,
    pub net: Mlp,
    /// Per-coordinate bound on the log-scale, `s = bound * tanh(raw)`.
    pub bound: Param,
}

#[derive(Debug, Clone)]
pub(crate) struct CouplingTape {
    net: MlpTape,
    tanh: Mat,
    out_b: Mat,
}

pub(crate) struct Conditioned {
    pub s: Mat,
    pub t: Mat,
    tanh: Mat,
}

impl Coupling {
    /// `parity` selects whether the even or the odd coordinates are transformed.
    pub fn new<R: Rng + ?Sized>(dim: usize, context_dim: usize, hidden: &[usize], parity: usize, rng: &mut R) -> Self {
        let (transformed, kept): (Vec<usize>, Vec<usize>) = (0..dim).partition(|i| i % 2 == parity % 2);
        let mut widths = vec![kept.len() + context_dim];
        widths.extend_from_slice(hidden);
        widths.push(2 * transformed.len());
        let mut net = Mlp::new(&widths, rng);
        net.zero_last();
        let bound = Param::new(vec![1.0; transformed.len()]);
        Coupling { kept, transformed, context_dim, net, bound }
    }

    fn net_input(&self, x: &Mat, ctx: Option<&Mat>) -> Mat {
        let a = gather(x, &self.kept);
        match ctx {
            Some(c) if self.context_dim > 0 => a.hcat(c),
            _ => a,
        }
    }

    fn split_output(&self, out: &Mat) -> Conditioned {
        let nb = self.transformed.len();
        let (raw, t) = out.hsplit(nb);
        let mut tanh = raw;
        let mut s = Mat::zeros(tanh.rows, nb);
        for r in 0..tanh.rows {
            for j in 0..nb {
                let th = tanh.data[r * nb + j].tanh();
                tanh.data[r * nb + j] = th;
                s.data[r * nb + j] = self.bound.value[j] * th;
            }
        }
        Conditioned { s, t, tanh }
    }

    pub(crate) fn condition(&self, x: &Mat, ctx: Option<&Mat>) -> Conditioned {
        self.split_output(&self.net.forward(&self.net_input(x, ctx)))
    }

    /// Generative map `y_b = x_b * exp(s) + t`; returns per-row log|det|.
    pub fn generate(&self, x: &Mat, ctx: Option<&Mat>) -> (Mat, Vec<f64>) {
        let Conditioned { s, t, .. } = self.condition(x, ctx);
        let xb = gather(x, &self.transformed);
        let nb = self.transformed.len();
        let mut yb = Mat::zeros(x.rows, nb);
        let mut ld = vec![0.0; x.rows];
        for r in 0..x.rows {
            for j in 0..nb {
                let k = r * nb + j;
                yb.data[k] = xb.data[k] * s.data[k].exp() + t.data[k];
                ld[r] += s.data[k];
            }
        }
        let mut y = x.clone();
        scatter(&mut y, &yb, &self.transformed);
        (y, ld)
    }

    /// Density map `x_b = (y_b - t) * exp(-s)`.
    pub fn density(&self, y: &Mat, ctx: Option<&Mat>) -> (Mat, Vec<f64>) {
        let (x, ld, _) = self.density_impl(y, ctx, false);
        (x, ld)
    }

    pub(crate) fn density_tape(&self, y: &Mat, ctx: Option<&Mat>) -> (Mat, Vec<f64>, CouplingTape) {
        let (x, ld, tape) = self.density_impl(y, ctx, true);
        (x, ld, tape.expect("taped"))
    }

    fn density_impl(&self, y: &Mat, ctx: Option<&Mat>, taped: bool) -> (Mat, Vec<f64>, Option<CouplingTape>) {
        let input = self.net_input(y, ctx);
        let (out, net_tape) = if taped {
            let (o, t) = self.net.forward_tape(&input);
            (o, Some(t))
        } else {
            (self.net.forward(&input), None)
        };
        let Conditioned { s, t, tanh } = self.split_output(&out);
        let yb = gather(y, &self.transformed);
        let nb = self.transformed.len();
        let mut xb = Mat::zeros(y.rows, nb);
        let mut ld = vec![0.0; y.rows];
        for r in 0..y.rows {
            for j in 0..nb {
                let k = r * nb + j;
                xb.data[k] = (yb.data[k] - t.data[k]) * (-s.data[k]).exp();
                ld[r] -= s.data[k];
            }
        }
        let mut x = y.clone();
        scatter(&mut x, &xb, &self.transformed);
        let tape = net_tape.map(|net| CouplingTape { net, tanh, out_b: xb });
        (x, ld, tape)
    }

    /// Backpropagates through the density map. `gx` is the gradient w.r.t.
    /// the output, `gld` w.r.t. the per-row log-determinant. Returns the
    /// gradient w.r.t. the input and adds the context gradient into `gctx`.
    pub(crate) fn density_backward(
        &mut self,
        tape: &CouplingTape,
        gx: &Mat,
        gld: &[f64],
        gctx: Option<&mut Mat>,
    ) -> Mat {
        self.bound.ensure_grad();
        let nb = self.transformed.len();
        let n = gx.rows;
        let gxb = gather(gx, &self.transformed);
        let mut gyb = Mat::zeros(n, nb);
        let mut gout = Mat::zeros(n, 2 * nb);
        for r in 0..n {
            for j in 0..nb {
                let k = r * nb + j;
                let th = tape.tanh.data[k];
                let s = self.bound.value[j] * th;
                let e = (-s).exp();
                gyb.data[k] = gxb.data[k] * e;
                let gt = -gxb.data[k] * e;
                let gs = -gxb.data[k] * tape.out_b.data[k] - gld[r];
                self.bound.grad[j] += gs * th;
                gout.data[r * 2 * nb + j] = gs * self.bound.value[j] * (1.0 - th * th);
                gout.data[r * 2 * nb + nb + j] = gt;
            }
        }
        let gin = self.net.backward(&tape.net, &gout);
        let na = self.kept.len();
        let (gya, gc) = gin.hsplit(na);
        if let Some(gctx) = gctx {
            for (a, b) in gctx.data.iter_mut().zip(&gc.data) {
                *a += b;
            }
        }
        let mut gy = gx.clone();
        // kept coordinates pass through unchanged and also feed the conditioner
        for r in 0..n {
            for (j, &i) in self.kept.iter().enumerate() {
                gy.data[r * gx.cols + i] += gya.data[r * na + j];
            }
        }
        scatter(&mut gy, &gyb, &self.transformed);
        gy
    }
}

impl Parameterized for Coupling {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.net.visit_params(f);
        f(&self.bound);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.net.visit_params_mut(f);
        f(&mut self.bound);
    }
}

/// Per-coordinate affine normalization, generative map `y = x * exp(ls) + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActNorm {
    pub log_scale: Param,
    pub bias: Param,
}

impl ActNorm {
    pub fn identity(dim: usize) -> Self {
        ActNorm { log_scale: Param::zeros(dim), bias: Param::zeros(dim) }
    }

    /// Sets the parameters so that the density map standardizes `y`.
    pub fn init_from(&mut self, y: &Mat) {
        let n = y.rows.max(1) as f64;
        let mean: Vec<f64> = y.column_sums().iter().map(|s| s / n).collect();
        for j in 0..y.cols {
            let var = (0..y.rows).map(|r| (y.data[r * y.cols + j] - mean[j]).powi(2)).sum::<f64>() / n;
            self.bias.value[j] = mean[j];
            self.log_scale.value[j] = var.sqrt().max(1e-3).ln();
        }
    }

    pub fn generate(&self, x: &Mat) -> (Mat, Vec<f64>) {
        let mut y = x.clone();
        let scale: Vec<f64> = self.log_scale.value.iter().map(|l| l.exp()).collect();
        for r in 0..y.rows {
            for (j, v) in y.row_mut(r).iter_mut().enumerate() {
                *v = *v * scale[j] + self.bias.value[j];
            }
        }
        let ld: f64 = self.log_scale.value.iter().sum();
        (y, vec![ld; x.rows])
    }

    pub fn density(&self, y: &Mat) -> (Mat, Vec<f64>) {
        let mut x = y.clone();
        let inv: Vec<f64> = self.log_scale.value.iter().map(|l| (-l).exp()).collect();
        for r in 0..x.rows {
            for (j, v) in x.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.bias.value[j]) * inv[j];
            }
        }
        let ld: f64 = -self.log_scale.value.iter().sum::<f64>();
        (x, vec![ld; y.rows])
    }

    /// `x` is the density-map output recorded in the forward pass.
    pub(crate) fn density_backward(&mut self, x: &Mat, gx: &Mat, gld: &[f64]) -> Mat {
        self.log_scale.ensure_grad();
        self.bias.ensure_grad();
        let inv: Vec<f64> = self.log_scale.value.iter().map(|l| (-l).exp()).collect();
        let total_gld: f64 = gld.iter().sum();
        let mut gy = gx.clone();
        for r in 0..gx.rows {
            for j in 0..gx.cols {
                let k = r * gx.cols + j;
                let g = gx.data[k] * inv[j];
                gy.data[k] = g;
                self.bias.grad[j] -= g;
                self.log_scale.grad[j] -= gx.data[k] * x.data[k];
            }
        }
        for g in self.log_scale.grad.iter_mut() {
            *g -= total_gld;
        }
        gy
    }
}

impl Parameterized for ActNorm {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.log_scale);
        f(&self.bias);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        f(&mut self.log_scale);
        f(&mut self.bias);
    }
}

/// Invertible linear mixing. The density map is `x = W y` with
/// `W = L (U + diag(exp(d)))`, `L` unit lower triangular and `U` strictly
/// upper triangular, both stored packed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LuLinear {
    pub dim: usize,
    pub lower: Param,
    pub upper: Param,
    pub log_diag: Param,
}

#[inline]
fn packed(i: usize, j: usize) -> usize {
    // entry (i, j) with j < i of a strictly triangular matrix
    i * (i - 1) / 2 + j
}

impl LuLinear {
    pub fn identity(dim: usize) -> Self {
        let tri = dim * (dim - 1) / 2;
        LuLinear { dim, lower: Param::zeros(tri), upper: Param::zeros(tri), log_diag: Param::zeros(dim) }
    }

    /// Dense `(L, U_full)` factors, row-major.
    fn factors(&self) -> (Mat, Mat) {
        let d = self.dim;
        let mut l = Mat::zeros(d, d);
        let mut u = Mat::zeros(d, d);
        for i in 0..d {
            l.data[i * d + i] = 1.0;
            u.data[i * d + i] = self.log_diag.value[i].exp();
            for j in 0..i {
                l.data[i * d + j] = self.lower.value[packed(i, j)];
                u.data[j * d + i] = self.upper.value[packed(i, j)];
            }
        }
        (l, u)
    }

    pub fn matrix(&self) -> Mat {
        let (l, u) = self.factors();
        let mut w = Mat::zeros(self.dim, self.dim);
        crate::nn::gemm(1.0, &l, false, &u, false, 0.0, &mut w);
        w
    }

    pub fn density(&self, y: &Mat) -> (Mat, Vec<f64>) {
        let w = self.matrix();
        let mut x = Mat::zeros(y.rows, self.dim);
        crate::nn::gemm(1.0, y, false, &w, true, 0.0, &mut x);
        let ld: f64 = self.log_diag.value.iter().sum();
        (x, vec![ld; y.rows])
    }

    /// Generative map `y = W^{-1} x` by two triangular solves.
    pub fn generate(&self, x: &Mat) -> (Mat, Vec<f64>) {
        let d = self.dim;
        let (l, u) = self.factors();
        let mut y = Mat::zeros(x.rows, d);
        let mut a = vec![0.0; d];
        for r in 0..x.rows {
            let xr = x.row(r);
            for i in 0..d {
                let mut v = xr[i];
                for j in 0..i {
                    v -= l.data[i * d + j] * a[j];
                }
                a[i] = v;
            }
            let yr = y.row_mut(r);
            for i in (0..d).rev() {
                let mut v = a[i];
                for j in i + 1..d {
                    v -= u.data[i * d + j] * yr[j];
                }
                yr[i] = v / u.data[i * d + i];
            }
        }
        let ld: f64 = -self.log_diag.value.iter().sum::<f64>();
        (y, vec![ld; x.rows])
    }

    /// `y` is the density-map input recorded in the forward pass.
    pub(crate) fn density_backward(&mut self, y: &Mat, gx: &Mat, gld: &[f64]) -> Mat {
        let d = self.dim;
        self.lower.ensure_grad();
        self.upper.ensure_grad();
        self.log_diag.ensure_grad();
        let (l, u) = self.factors();
        let w = self.matrix();
        let mut gy = Mat::zeros(gx.rows, d);
        crate::nn::gemm(1.0, gx, false, &w, false, 0.0, &mut gy);
        let mut gw = Mat::zeros(d, d);
        crate::nn::gemm(1.0, gx, true, y, false, 0.0, &mut gw);
        let mut gl = Mat::zeros(d, d);
        crate::nn::gemm(1.0, &gw, false, &u, true, 0.0, &mut gl);
        let mut gu = Mat::zeros(d, d);
        crate::nn::gemm(1.0, &l, true, &gw, false, 0.0, &mut gu);
        let total_gld: f64 = gld.iter().sum();
        for i in 0..d {
            self.log_diag.grad[i] += gu.data[i * d + i] * u.data[i * d + i] + total_gld;
            for j in 0..i {
                self.lower.grad[packed(i, j)] += gl.data[i * d + j];
                self.upper.grad[packed(i, j)] += gu.data[j * d + i];
            }
        }
        gy
    }
}

impl Parameterized for LuLinear {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.lower);
        f(&self.upper);
        f(&self.log_diag);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        f(&mut self.lower);
        f(&mut self.upper);
        f(&mut self.log_diag);
    }
}
