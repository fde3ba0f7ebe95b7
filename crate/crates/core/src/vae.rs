//! Convolutional VAE over signed distance fields with a flow prior.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::System;
use crate::error::{Error, Result};
use crate::flow::{Flow, FlowConfig, FlowTape};
use crate::grid::SdfGrid;
use crate::nn::{relu_inplace, Conv, ConvTranspose, Linear, Mat, Param, Parameterized};

pub const LOGVAR_CLAMP: f64 = 10.0;
const CONV_LAYERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// Spatial dimension of the SDF (2 or 3).
    pub dim: usize,
    /// Cells per side; must be divisible by 16.
    pub cells: usize,
    pub h_dim: usize,
    pub channels: [usize; CONV_LAYERS],
    pub prior_depth: usize,
    pub prior_hidden: Vec<usize>,
    /// SDF values are clamped to this magnitude (meters) and rescaled to [-1, 1].
    pub sdf_clip: f64,
}

impl VaeConfig {
    pub fn for_system(system: System) -> Self {
        match system {
            System::Planar => VaeConfig {
                dim: 2,
                cells: 64,
                h_dim: 64,
                channels: [16, 32, 64, 128],
                prior_depth: 4,
                prior_hidden: vec![128, 128],
                sdf_clip: 1.0,
            },
            System::Quadrotor => VaeConfig {
                dim: 3,
                cells: 64,
                h_dim: 256,
                channels: [8, 16, 32, 64],
                prior_depth: 4,
                prior_hidden: vec![128, 128],
                sdf_clip: 1.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::InvalidParams(format!("SDF dimension must be 2 or 3, got {}", self.dim)));
        }
        if self.cells < 16 || self.cells % 16 != 0 {
            return Err(Error::InvalidParams(format!(
                "{} cells per side cannot be halved {CONV_LAYERS} times",
                self.cells
            )));
        }
        if self.h_dim < 2 || !(self.sdf_clip > 0.0) {
            return Err(Error::InvalidParams("h_dim must be at least 2 and sdf_clip positive".into()));
        }
        Ok(())
    }

    pub fn sdf_len(&self) -> usize {
        self.cells.pow(self.dim as u32)
    }

    fn bottleneck_len(&self) -> usize {
        self.channels[CONV_LAYERS - 1] * (self.cells >> CONV_LAYERS).pow(self.dim as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub convs: Vec<Conv>,
    pub fc: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub fc: Linear,
    pub deconvs: Vec<ConvTranspose>,
}

/// Gaussian parameters produced by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub mean: Vec<f64>,
    /// Clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]`.
    pub logvar: Vec<f64>,
}

struct EncoderTape {
    cols: Vec<Mat>,
    activations: Vec<Mat>,
    flat: Mat,
    clamped: Vec<bool>,
}

struct DecoderTape {
    h: Mat,
    inputs: Vec<Mat>,
}

impl Encoder {
    fn new<R: Rng + ?Sized>(cfg: &VaeConfig, rng: &mut R) -> Self {
        let mut convs = Vec::with_capacity(CONV_LAYERS);
        let mut in_ch = 1;
        let mut size = cfg.cells;
        for &out_ch in &cfg.channels {
            let conv = Conv::new(cfg.dim, in_ch, out_ch, size, rng);
            size = conv.geometry.out[1];
            convs.push(conv);
            in_ch = out_ch;
        }
        assert_eq!(size, cfg.cells >> CONV_LAYERS, "encoder spatial reduction");
        Encoder { convs, fc: Linear::new(cfg.bottleneck_len(), 2 * cfg.h_dim, rng) }
    }

    fn forward(&self, x: &Mat, taped: bool) -> (EncoderOutput, Option<EncoderTape>) {
        let mut a = x.clone();
        let mut cols = Vec::new();
        let mut activations = Vec::new();
        for conv in &self.convs {
            let (mut y, c) = conv.forward(&a);
            relu_inplace(&mut y);
            if taped {
                cols.push(c);
                activations.push(y.clone());
            }
            a = y;
        }
        let flat = Mat::from_vec(1, a.data.len(), a.data);
        let out = self.fc.forward(&flat);
        let h = self.fc.outputs / 2;
        let mean = out.data[..h].to_vec();
        let raw = &out.data[h..];
        let logvar = raw.iter().map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)).collect();
        let clamped = raw.iter().map(|v| v.abs() > LOGVAR_CLAMP).collect();
        let tape = taped.then(|| EncoderTape { cols, activations, flat, clamped });
        (EncoderOutput { mean, logvar }, tape)
    }

    fn backward(&mut self, tape: &EncoderTape, g_mean: &[f64], g_logvar: &[f64]) {
        let mut gout = Vec::with_capacity(self.fc.outputs);
        gout.extend_from_slice(g_mean);
        gout.extend(g_logvar.iter().zip(&tape.clamped).map(|(g, &c)| if c { 0.0 } else { *g }));
        let gflat = self.fc.backward(&tape.flat, &Mat::from_vec(1, gout.len(), gout));
        let last = &tape.activations[CONV_LAYERS - 1];
        let mut g = Mat::from_vec(last.rows, last.cols, gflat.data);
        for i in (0..CONV_LAYERS).rev() {
            for (gv, a) in g.data.iter_mut().zip(&tape.activations[i].data) {
                if *a <= 0.0 {
                    *gv = 0.0;
                }
            }
            g = self.convs[i].backward(&tape.cols[i], &g);
        }
    }
}

impl Decoder {
    fn new<R: Rng + ?Sized>(cfg: &VaeConfig, rng: &mut R) -> Self {
        let fc = Linear::new(cfg.h_dim, cfg.bottleneck_len(), rng);
        let mut deconvs = Vec::with_capacity(CONV_LAYERS);
        let mut size = cfg.cells >> CONV_LAYERS;
        for i in (0..CONV_LAYERS).rev() {
            let out_ch = if i == 0 { 1 } else { cfg.channels[i - 1] };
            deconvs.push(ConvTranspose::new(cfg.dim, cfg.channels[i], out_ch, size, rng));
            size *= 2;
        }
        assert_eq!(size, cfg.cells, "decoder spatial expansion");
        Decoder { fc, deconvs }
    }

    fn forward(&self, h: &[f64], taped: bool) -> (Vec<f64>, Option<DecoderTape>) {
        let hm = Mat::from_vec(1, h.len(), h.to_vec());
        let mut a = self.fc.forward(&hm);
        relu_inplace(&mut a);
        let first = &self.deconvs[0];
        let mut a = Mat::from_vec(first.in_channels, a.data.len() / first.in_channels, a.data);
        let mut inputs = Vec::new();
        let last = self.deconvs.len() - 1;
        for (i, d) in self.deconvs.iter().enumerate() {
            let mut y = d.forward(&a);
            if i < last {
                relu_inplace(&mut y);
            }
            if taped {
                inputs.push(std::mem::replace(&mut a, y));
            } else {
                a = y;
            }
        }
        let tape = taped.then(|| DecoderTape { h: hm, inputs });
        (a.data, tape)
    }

    /// Returns the gradient w.r.t. `h`.
    fn backward(&mut self, tape: &DecoderTape, g_out: &[f64]) -> Vec<f64> {
        let mut g = Mat::from_vec(1, g_out.len(), g_out.to_vec());
        for i in (0..self.deconvs.len()).rev() {
            let x = &tape.inputs[i];
            g = self.deconvs[i].backward(x, &g);
            // every deconv input is a ReLU output
            for (gv, a) in g.data.iter_mut().zip(&x.data) {
                if *a <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let g = Mat::from_vec(1, g.data.len(), g.data);
        self.fc.backward(&tape.h, &g).data
    }
}

/// Terms of the single-sample VAE objective, already divided by the SDF
/// dimensionality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeLoss {
    pub reconstruction: f64,
    pub log_q: f64,
    pub log_prior: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vae {
    pub config: VaeConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub prior: Flow,
}

/// Everything the backward pass of a training step needs.
pub struct VaeForward {
    pub output: EncoderOutput,
    pub h: Vec<f64>,
    pub loss: VaeLoss,
    input: Vec<f64>,
    eps: Vec<f64>,
    reconstruction: Vec<f64>,
    encoder: EncoderTape,
    decoder: DecoderTape,
    prior: FlowTape,
}

fn diag_gaussian_log_prob(h: &[f64], out: &EncoderOutput) -> f64 {
    h.iter()
        .zip(out.mean.iter().zip(&out.logvar))
        .map(|(x, (m, lv))| -0.5 * ((2.0 * PI).ln() + lv + (x - m).powi(2) * (-lv).exp()))
        .sum()
}

/// Squared reconstruction error.
fn squared_error(input: &[f64], recon: &[f64]) -> f64 {
    input.iter().zip(recon).map(|(a, b)| (a - b).powi(2)).sum()
}

/// Single-sample VAE objective on a prepared (clamped, rescaled) SDF.
///
/// `(‖Ê − E‖² + log q(h|E) − log p(h)) / D` with `D` the number of SDF cells.
pub fn vae_loss(input: &[f64], out: &EncoderOutput, h: &[f64], reconstruction: &[f64], prior: &Flow) -> Result<VaeLoss> {
    if input.len() != reconstruction.len() {
        return Err(Error::Shape { expected: format!("{} cells", input.len()), got: format!("{}", reconstruction.len()) });
    }
    let d = input.len() as f64;
    let log_prior = prior.log_prob(&Mat::from_vec(1, h.len(), h.to_vec()), None)?[0];
    Ok(assemble_loss(squared_error(input, reconstruction), diag_gaussian_log_prob(h, out), log_prior, d))
}

fn assemble_loss(sq: f64, log_q: f64, log_prior: f64, d: f64) -> VaeLoss {
    VaeLoss {
        reconstruction: sq / d,
        log_q: log_q / d,
        log_prior: log_prior / d,
        total: (sq + log_q - log_prior) / d,
    }
}

/// Per-dimension negative log-density of `h` under the prior.
pub fn ood_score(h: &[f64], prior: &Flow) -> Result<f64> {
    let lp = prior.log_prob(&Mat::from_vec(1, h.len(), h.to_vec()), None)?;
    Ok(-lp[0] / h.len() as f64)
}

impl Vae {
    pub fn new<R: Rng + ?Sized>(config: VaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&config, rng);
        let decoder = Decoder::new(&config, rng);
        let prior = Flow::new(
            FlowConfig { dim: config.h_dim, depth: config.prior_depth, context_dim: 0, hidden: config.prior_hidden.clone() },
            rng,
        )?;
        Ok(Vae { config, encoder, decoder, prior })
    }

    pub fn h_dim(&self) -> usize {
        self.config.h_dim
    }

    /// Clamps and rescales the SDF into the network input.
    pub fn prepare(&self, sdf: &SdfGrid) -> Result<Vec<f64>> {
        let spec = sdf.spec;
        if spec.dim != self.config.dim || spec.cells != self.config.cells {
            return Err(Error::Shape {
                expected: format!("{}-D grid with {} cells per side", self.config.dim, self.config.cells),
                got: format!("{}-D grid with {} cells per side", spec.dim, spec.cells),
            });
        }
        let c = self.config.sdf_clip;
        Ok(sdf.values.iter().map(|v| v.clamp(-c, c) / c).collect())
    }

    fn input_mat(&self, input: &[f64]) -> Mat {
        Mat::from_vec(1, input.len(), input.to_vec())
    }

    /// Encoder output and an embedding: a reparameterized sample when `rng`
    /// is given, the mean otherwise.
    pub fn encode<R: Rng + ?Sized>(&self, sdf: &SdfGrid, rng: Option<&mut R>) -> Result<(EncoderOutput, Vec<f64>)> {
        let input = self.prepare(sdf)?;
        let (out, _) = self.encoder.forward(&self.input_mat(&input), false);
        let h = match rng {
            Some(rng) => out
                .mean
                .iter()
                .zip(&out.logvar)
                .map(|(m, lv)| m + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            None => out.mean.clone(),
        };
        Ok((out, h))
    }

    /// Encoder mean for an already prepared input.
    pub fn embed_prepared(&self, input: &[f64]) -> Vec<f64> {
        self.encoder.forward(&self.input_mat(input), false).0.mean
    }

    /// Reconstruction in the prepared (rescaled) units.
    pub fn decode(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.config.h_dim {
            return Err(Error::Shape { expected: format!("h of length {}", self.config.h_dim), got: format!("{}", h.len()) });
        }
        Ok(self.decoder.forward(h, false).0)
    }

    pub fn ood_score(&self, h: &[f64]) -> Result<f64> {
        ood_score(h, &self.prior)
    }

    /// Taped forward pass of one training sample.
    pub fn forward_train<R: Rng + ?Sized>(&self, sdf: &SdfGrid, rng: &mut R) -> Result<VaeForward> {
        let input = self.prepare(sdf)?;
        self.forward_train_prepared(input, rng)
    }

    pub fn forward_train_prepared<R: Rng + ?Sized>(&self, input: Vec<f64>, rng: &mut R) -> Result<VaeForward> {
        if input.len() != self.config.sdf_len() {
            return Err(Error::Shape { expected: format!("{} cells", self.config.sdf_len()), got: format!("{}", input.len()) });
        }
        let (output, enc_tape) = self.encoder.forward(&self.input_mat(&input), true);
        let eps: Vec<f64> = (0..self.config.h_dim).map(|_| rng.sample(StandardNormal)).collect();
        let h: Vec<f64> = output
            .mean
            .iter()
            .zip(&output.logvar)
            .zip(&eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let (reconstruction, dec_tape) = self.decoder.forward(&h, true);
        let (lp, prior_tape) = self.prior.log_prob_tape(&Mat::from_vec(1, h.len(), h.clone()), None)?;
        let d = input.len() as f64;
        let loss = assemble_loss(
            squared_error(&input, &reconstruction),
            diag_gaussian_log_prob(&h, &output),
            lp[0],
            d,
        );
        if !loss.total.is_finite() {
            return Err(Error::NonFinite { layer: "vae loss".into() });
        }
        Ok(VaeForward {
            output,
            h,
            loss,
            input,
            eps,
            reconstruction,
            encoder: enc_tape.expect("taped"),
            decoder: dec_tape.expect("taped"),
            prior: prior_tape,
        })
    }

    /// Accumulates gradients of `scale * loss.total + <extra_gh, h>` into
    /// the encoder, decoder and prior. `extra_gh` carries any downstream
    /// gradient on the sampled embedding.
    pub fn backward_train(&mut self, fwd: &VaeForward, scale: f64, extra_gh: Option<&[f64]>) {
        let d = fwd.input.len() as f64;
        let c = scale / d;
        let g_rec: Vec<f64> = fwd.reconstruction.iter().zip(&fwd.input).map(|(r, x)| 2.0 * c * (r - x)).collect();
        let mut gh = self.decoder.backward(&fwd.decoder, &g_rec);
        // the prior enters with a minus sign
        let gprior = self.prior.backward(&fwd.prior, &[-c]);
        for (g, p) in gh.iter_mut().zip(&gprior.data.data) {
            *g += p;
        }
        if let Some(extra) = extra_gh {
            for (g, e) in gh.iter_mut().zip(extra) {
                *g += e;
            }
        }
        // log q(h|E) along the reparameterized path is -0.5 logvar - 0.5 eps^2 per
        // coordinate, so it only contributes to the log-variance gradient
        let g_mean = gh.clone();
        let g_logvar: Vec<f64> = gh
            .iter()
            .zip(&fwd.eps)
            .zip(&fwd.output.logvar)
            .map(|((g, e), lv)| g * e * 0.5 * (0.5 * lv).exp() - 0.5 * c)
            .collect();
        self.encoder.backward(&fwd.encoder, &g_mean, &g_logvar);
    }

    /// Gradient w.r.t. `h` of the reconstruction term alone (undivided),
    /// without touching parameter gradients.
    pub fn reconstruction_grad_h(&self, input: &[f64], h: &[f64]) -> Vec<f64> {
        let mut scratch = self.decoder.clone();
        let (recon, tape) = scratch.forward(h, true);
        let g: Vec<f64> = recon.iter().zip(input).map(|(r, x)| 2.0 * (r - x)).collect();
        scratch.backward(&tape.expect("taped"), &g)
    }
}

impl Parameterized for Encoder {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for c in &self.convs {
            c.visit_params(f);
        }
        self.fc.visit_params(f);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        for c in &mut self.convs {
            c.visit_params_mut(f);
        }
        self.fc.visit_params_mut(f);
    }
}

impl Parameterized for Decoder {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.fc.visit_params(f);
        for d in &self.deconvs {
            d.visit_params(f);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.fc.visit_params_mut(f);
        for d in &mut self.deconvs {
            d.visit_params_mut(f);
        }
    }
}

impl Parameterized for Vae {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.encoder.visit_params(f);
        self.decoder.visit_params(f);
        self.prior.visit_params(f);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.encoder.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
        self.prior.visit_params_mut(f);
    }
}
