//! Conditional affine-coupling normalizing flow.
//!
//! `forward` maps latent points to data points, `inverse` maps data points
//! back to the latent space. Log-densities are evaluated with `inverse`,
//! which is also the only direction that supports backpropagation.

mod layers;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mat, Param, Parameterized};

pub use layers::{ActNorm, Coupling, LuLinear};
use layers::CouplingTape;

pub const DEFAULT_HIDDEN: [usize; 2] = [128, 128];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub depth: usize,
    /// Zero for an unconditional flow.
    pub context_dim: usize,
    pub hidden: Vec<usize>,
}

impl FlowConfig {
    pub fn new(dim: usize, depth: usize, context_dim: usize) -> Self {
        FlowConfig { dim, depth, context_dim, hidden: DEFAULT_HIDDEN.to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidParams(format!("flow dim must be at least 2, got {}", self.dim)));
        }
        if self.depth < 1 {
            return Err(Error::InvalidParams("flow depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// One block, generative order: coupling, normalization, linear mixing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowBlock {
    pub coupling: Coupling,
    pub norm: ActNorm,
    pub linear: LuLinear,
}

impl Parameterized for FlowBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.coupling.visit_params(f);
        self.norm.visit_params(f);
        self.linear.visit_params(f);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.coupling.visit_params_mut(f);
        self.norm.visit_params_mut(f);
        self.linear.visit_params_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub config: FlowConfig,
    pub blocks: Vec<FlowBlock>,
    /// Extra coupling applied after the last block on the data side.
    pub output: Coupling,
}

struct BlockTape {
    linear_in: Mat,
    norm_out: Mat,
    coupling: CouplingTape,
}

/// Recorded density pass, consumed by `Flow::backward`.
pub struct FlowTape {
    output: CouplingTape,
    blocks: Vec<BlockTape>,
    z: Mat,
    has_context: bool,
}

/// Gradients returned by `Flow::backward`.
#[derive(Debug, Clone)]
pub struct InputGrads {
    pub data: Mat,
    /// One row per sample; `None` for unconditional flows.
    pub context: Option<Mat>,
}

/// Standard normal log-density of each row.
pub fn standard_normal_log_prob(z: &Mat) -> Vec<f64> {
    let c = -0.5 * z.cols as f64 * (2.0 * PI).ln();
    (0..z.rows).map(|r| c - 0.5 * z.row(r).iter().map(|v| v * v).sum::<f64>()).collect()
}

fn check_finite(m: &Mat, ld: &[f64], layer: impl FnOnce() -> String) -> Result<()> {
    if m.is_finite() && ld.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer: layer() })
    }
}

fn add_into(acc: &mut [f64], ld: &[f64]) {
    for (a, b) in acc.iter_mut().zip(ld) {
        *a += b;
    }
}

impl Flow {
    /// Identity-initialized flow: zeroed conditioner outputs, unit
    /// normalization and identity mixing.
    pub fn new<R: Rng + ?Sized>(config: FlowConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.depth)
            .map(|i| FlowBlock {
                coupling: Coupling::new(config.dim, config.context_dim, &config.hidden, i % 2, rng),
                norm: ActNorm::identity(config.dim),
                linear: LuLinear::identity(config.dim),
            })
            .collect();
        let output = Coupling::new(config.dim, config.context_dim, &config.hidden, config.depth % 2, rng);
        Ok(Flow { config, blocks, output })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    fn check_shapes(&self, x: &Mat, ctx: Option<&Mat>) -> Result<()> {
        if x.cols != self.config.dim {
            return Err(Error::Shape { expected: format!("{} columns", self.config.dim), got: format!("{}", x.cols) });
        }
        if self.config.context_dim > 0 {
            match ctx {
                Some(c) if c.cols == self.config.context_dim && c.rows == x.rows => {}
                Some(c) => {
                    return Err(Error::Shape {
                        expected: format!("context {}x{}", x.rows, self.config.context_dim),
                        got: format!("{}x{}", c.rows, c.cols),
                    })
                }
                None => return Err(Error::InvalidParams("conditional flow needs a context".into())),
            }
        }
        Ok(())
    }

    fn ctx<'a>(&self, ctx: Option<&'a Mat>) -> Option<&'a Mat> {
        if self.config.context_dim > 0 {
            ctx
        } else {
            None
        }
    }

    /// Latent to data. Returns the data points and the per-row log|det| of
    /// the Jacobian of this map.
    pub fn forward(&self, z: &Mat, ctx: Option<&Mat>) -> Result<(Mat, Vec<f64>)> {
        self.check_shapes(z, ctx)?;
        let ctx = self.ctx(ctx);
        let mut x = z.clone();
        let mut total = vec![0.0; z.rows];
        for (i, b) in self.blocks.iter().enumerate() {
            let (y, ld) = b.coupling.generate(&x, ctx);
            check_finite(&y, &ld, || format!("block {i} coupling"))?;
            add_into(&mut total, &ld);
            let (y, ld) = b.norm.generate(&y);
            check_finite(&y, &ld, || format!("block {i} normalization"))?;
            add_into(&mut total, &ld);
            let (y, ld) = b.linear.generate(&y);
            check_finite(&y, &ld, || format!("block {i} linear"))?;
            add_into(&mut total, &ld);
            x = y;
        }
        let (y, ld) = self.output.generate(&x, ctx);
        check_finite(&y, &ld, || "output coupling".into())?;
        add_into(&mut total, &ld);
        Ok((y, total))
    }

    /// Data to latent, with the per-row log|det| of this map.
    pub fn inverse(&self, y: &Mat, ctx: Option<&Mat>) -> Result<(Mat, Vec<f64>)> {
        self.check_shapes(y, ctx)?;
        let ctx = self.ctx(ctx);
        let (mut x, mut total) = self.output.density(y, ctx);
        check_finite(&x, &total, || "output coupling".into())?;
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let (v, ld) = b.linear.density(&x);
            check_finite(&v, &ld, || format!("block {i} linear"))?;
            add_into(&mut total, &ld);
            let (v, ld) = b.norm.density(&v);
            check_finite(&v, &ld, || format!("block {i} normalization"))?;
            add_into(&mut total, &ld);
            let (v, ld) = b.coupling.density(&v, ctx);
            check_finite(&v, &ld, || format!("block {i} coupling"))?;
            add_into(&mut total, &ld);
            x = v;
        }
        Ok((x, total))
    }

    pub fn log_prob(&self, y: &Mat, ctx: Option<&Mat>) -> Result<Vec<f64>> {
        let (z, ld) = self.inverse(y, ctx)?;
        let mut lp = standard_normal_log_prob(&z);
        add_into(&mut lp, &ld);
        Ok(lp)
    }

    /// Log-density with a tape for `backward`.
    pub fn log_prob_tape(&self, y: &Mat, ctx: Option<&Mat>) -> Result<(Vec<f64>, FlowTape)> {
        self.check_shapes(y, ctx)?;
        let ctx = self.ctx(ctx);
        let (mut x, mut total, output) = self.output.density_tape(y, ctx);
        check_finite(&x, &total, || "output coupling".into())?;
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let (v, ld) = b.linear.density(&x);
            check_finite(&v, &ld, || format!("block {i} linear"))?;
            add_into(&mut total, &ld);
            let linear_in = std::mem::replace(&mut x, v);
            let (v, ld) = b.norm.density(&x);
            check_finite(&v, &ld, || format!("block {i} normalization"))?;
            add_into(&mut total, &ld);
            let (v2, ld, coupling) = b.coupling.density_tape(&v, ctx);
            check_finite(&v2, &ld, || format!("block {i} coupling"))?;
            add_into(&mut total, &ld);
            tapes.push(BlockTape { linear_in, norm_out: v, coupling });
            x = v2;
        }
        tapes.reverse();
        let mut lp = standard_normal_log_prob(&x);
        add_into(&mut lp, &total);
        Ok((lp, FlowTape { output, blocks: tapes, z: x, has_context: ctx.is_some() }))
    }

    /// Given `g[i] = dL/d log_prob[i]`, accumulates parameter gradients and
    /// returns the gradients with respect to the data points and context.
    pub fn backward(&mut self, tape: &FlowTape, g: &[f64]) -> InputGrads {
        let n = tape.z.rows;
        assert_eq!(g.len(), n, "one upstream gradient per row");
        let mut gx = tape.z.clone();
        for r in 0..n {
            for v in gx.row_mut(r) {
                *v *= -g[r];
            }
        }
        let mut gctx = tape.has_context.then(|| Mat::zeros(n, self.config.context_dim));
        for (b, t) in self.blocks.iter_mut().zip(&tape.blocks) {
            let gv = b.coupling.density_backward(&t.coupling, &gx, g, gctx.as_mut());
            let gv = b.norm.density_backward(&t.norm_out, &gv, g);
            gx = b.linear.density_backward(&t.linear_in, &gv, g);
        }
        let gx = self.output.density_backward(&tape.output, &gx, g, gctx.as_mut());
        InputGrads { data: gx, context: gctx }
    }

    /// Draws `n` samples with their log-densities. `ctx` is a single context
    /// row shared by all samples.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, ctx: Option<&[f64]>, rng: &mut R) -> Result<(Mat, Vec<f64>)> {
        let z = Mat::from_vec(n, self.config.dim, (0..n * self.config.dim).map(|_| rng.sample(StandardNormal)).collect());
        let ctx = ctx.map(|c| Mat::broadcast_row(c, n));
        let (y, ld) = self.forward(&z, ctx.as_ref())?;
        let mut lp = standard_normal_log_prob(&z);
        for (a, b) in lp.iter_mut().zip(&ld) {
            *a -= b;
        }
        Ok((y, lp))
    }

    /// Data-dependent initialization: walks the density direction on a
    /// batch and sets each normalization layer to standardize its input.
    pub fn data_init(&mut self, y: &Mat, ctx: Option<&Mat>) -> Result<()> {
        self.check_shapes(y, ctx)?;
        let ctx = if self.config.context_dim > 0 { ctx.cloned() } else { None };
        let (mut x, _) = self.output.density(y, ctx.as_ref());
        for b in self.blocks.iter_mut().rev() {
            let (v, _) = b.linear.density(&x);
            b.norm.init_from(&v);
            let (v, _) = b.norm.density(&v);
            let (v, _) = b.coupling.density(&v, ctx.as_ref());
            x = v;
        }
        if x.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { layer: "data-dependent initialization".into() })
        }
    }
}

impl Parameterized for Flow {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for b in &self.blocks {
            b.visit_params(f);
        }
        self.output.visit_params(f);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
        self.output.visit_params_mut(f);
    }
}
