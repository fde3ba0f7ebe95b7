//! The conditional control-sequence posterior `q(U | C)`: context network,
//! perturbed sampling, importance weights, the weighted likelihood loss and
//! end-to-end training together with the environment VAE.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::EnvRecord;
use crate::dynamics::{rollout_costs, CostParams, System, HORIZON};
use crate::error::{Error, Result};
use crate::flow::{Flow, FlowConfig, FlowTape};
use crate::nn::{Adam, AdamState, Mat, Mlp, MlpTape, Param, Parameterized};
use crate::vae::{Vae, VaeConfig};

/// `C = g(x0, xG, h)`: one hidden ReLU layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextNet {
    pub state_dim: usize,
    pub h_dim: usize,
    pub mlp: Mlp,
}

impl ContextNet {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, h_dim: usize, hidden: usize, context_dim: usize, rng: &mut R) -> Self {
        ContextNet { state_dim, h_dim, mlp: Mlp::new(&[2 * state_dim + h_dim, hidden, context_dim], rng) }
    }

    pub fn context_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    fn input(&self, x0: &[f64], xg: &[f64], h: &[f64]) -> Result<Mat> {
        if x0.len() != self.state_dim || xg.len() != self.state_dim || h.len() != self.h_dim {
            return Err(Error::Shape {
                expected: format!("states of length {} and h of length {}", self.state_dim, self.h_dim),
                got: format!("{}, {} and {}", x0.len(), xg.len(), h.len()),
            });
        }
        Ok(Mat::from_vec(1, self.mlp.input_dim(), [x0, xg, h].concat()))
    }

    pub fn forward(&self, x0: &[f64], xg: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        Ok(self.mlp.forward(&self.input(x0, xg, h)?).data)
    }

    pub fn forward_tape(&self, x0: &[f64], xg: &[f64], h: &[f64]) -> Result<(Vec<f64>, MlpTape)> {
        let (c, tape) = self.mlp.forward_tape(&self.input(x0, xg, h)?);
        Ok((c.data, tape))
    }

    /// Accumulates parameter gradients; returns the gradient on `h`.
    pub fn backward(&mut self, tape: &MlpTape, gc: &[f64]) -> Vec<f64> {
        let dx = self.mlp.backward(tape, &Mat::from_vec(1, gc.len(), gc.to_vec()));
        dx.data[2 * self.state_dim..].to_vec()
    }
}

impl Parameterized for ContextNet {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.mlp.visit_params(f);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.mlp.visit_params_mut(f);
    }
}

/// Samples with their log-densities under the posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    /// One control sequence per row, time-major.
    pub u: Mat,
    pub log_q: Vec<f64>,
}

const REFILL_ROUNDS: usize = 20;

fn normal_mat<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Rows of `f(Z, C)` that came out finite. Falls back to row-wise
/// evaluation when the batch pass reports a non-finite value.
fn finite_forward(flow: &Flow, z: &Mat, ctx: &[f64]) -> Vec<Vec<f64>> {
    let c = (!ctx.is_empty()).then(|| Mat::broadcast_row(ctx, z.rows));
    match flow.forward(z, c.as_ref()) {
        Ok((y, _)) => (0..y.rows).map(|r| y.row(r).to_vec()).collect(),
        Err(_) => {
            let c1 = (!ctx.is_empty()).then(|| Mat::broadcast_row(ctx, 1));
            (0..z.rows)
                .filter_map(|r| {
                    let zr = Mat::from_vec(1, z.cols, z.row(r).to_vec());
                    flow.forward(&zr, c1.as_ref()).ok().map(|(y, _)| y.data)
                })
                .collect()
        }
    }
}

/// `U = f(Z, C) + eps` with `Z ~ N(0, I)` and `eps ~ N(0, sigma_eps I)`,
/// `sigma_eps` being a variance. Rows that come out non-finite are redrawn.
pub fn perturbed_controls<R: Rng + ?Sized>(flow: &Flow, ctx: &[f64], sigma_eps: f64, k: usize, rng: &mut R) -> Result<Mat> {
    if k == 0 {
        return Err(Error::InvalidParams("sample count must be at least 1".into()));
    }
    if !(sigma_eps >= 0.0) {
        return Err(Error::InvalidParams(format!("perturbation variance must be non-negative, got {sigma_eps}")));
    }
    let d = flow.dim();
    let std = sigma_eps.sqrt();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..REFILL_ROUNDS {
        let need = k - rows.len();
        let z = normal_mat(need, d, 1.0, rng);
        let eps = normal_mat(need, d, std, rng);
        let ys = finite_forward(flow, &z, ctx);
        if ys.len() < need {
            // keep row/perturbation pairing simple: perturb whatever survived
            warn!("{} of {} posterior samples were non-finite; redrawing", need - ys.len(), need);
        }
        for (i, mut y) in ys.into_iter().enumerate() {
            for (v, e) in y.iter_mut().zip(eps.row(i)) {
                *v += e;
            }
            rows.push(y);
        }
        if rows.len() == k {
            return Ok(Mat::from_vec(k, d, rows.concat()));
        }
    }
    Err(Error::NonFinite { layer: "posterior sampling".into() })
}

/// Perturbed posterior samples with log-densities evaluated at the
/// perturbed points through the density direction. Samples whose density
/// is not finite are replaced.
pub fn sample_pert_u<R: Rng + ?Sized>(flow: &Flow, ctx: &[f64], sigma_eps: f64, k: usize, rng: &mut R) -> Result<PosteriorSamples> {
    let mut u_rows: Vec<f64> = Vec::with_capacity(k * flow.dim());
    let mut log_q = Vec::with_capacity(k);
    for _ in 0..REFILL_ROUNDS {
        let need = k - log_q.len();
        let u = perturbed_controls(flow, ctx, sigma_eps, need, rng)?;
        let c = (!ctx.is_empty()).then(|| Mat::broadcast_row(ctx, need));
        let lp = match flow.log_prob(&u, c.as_ref()) {
            Ok(lp) => lp,
            Err(_) => (0..need)
                .map(|r| {
                    let ur = Mat::from_vec(1, u.cols, u.row(r).to_vec());
                    let c1 = c.as_ref().map(|_| Mat::broadcast_row(ctx, 1));
                    flow.log_prob(&ur, c1.as_ref()).map(|v| v[0]).unwrap_or(f64::NAN)
                })
                .collect(),
        };
        for (r, l) in lp.into_iter().enumerate() {
            if l.is_finite() {
                u_rows.extend_from_slice(u.row(r));
                log_q.push(l);
            }
        }
        if log_q.len() == k {
            return Ok(PosteriorSamples { u: Mat::from_vec(k, flow.dim(), u_rows), log_q });
        }
    }
    Err(Error::NonFinite { layer: "posterior density".into() })
}

/// Self-normalized importance weights
/// `w_i ∝ q(U_i)^(-beta) exp(-J_i / alpha)`, scaled so their mean is one.
/// Infinite costs get zero weight; if every cost is infinite the weights
/// are uniform.
pub fn importance_weights(log_q: &[f64], costs: &[f64], alpha: f64, beta: f64) -> Result<Vec<f64>> {
    let r = log_q.len();
    if r == 0 || costs.len() != r {
        return Err(Error::InvalidParams(format!("need matching non-empty inputs, got {} densities and {} costs", r, costs.len())));
    }
    if !(alpha > 0.0) || !(beta >= 0.0) || !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::InvalidParams(format!("need alpha > 0 and beta >= 0, got alpha={alpha}, beta={beta}")));
    }
    if log_q.iter().any(|v| !v.is_finite()) || costs.iter().any(|c| c.is_nan() || *c == f64::NEG_INFINITY) {
        return Err(Error::InvalidParams("log-densities must be finite and costs must not be NaN or -inf".into()));
    }
    let lw: Vec<f64> = log_q.iter().zip(costs).map(|(lq, j)| -beta * lq - j / alpha).collect();
    let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        warn!("all {r} sample costs are infinite; using uniform importance weights");
        return Ok(vec![1.0; r]);
    }
    let mean = lw.iter().map(|v| (v - max).exp()).sum::<f64>() / r as f64;
    let lme = max + mean.ln();
    let mut w: Vec<f64> = lw.iter().map(|v| (v - lme).exp()).collect();
    let s = w.iter().sum::<f64>() / r as f64;
    for v in w.iter_mut() {
        *v /= s;
    }
    Ok(w)
}

/// `-sum_i w_i log q_i`.
pub fn flow_nll_loss(log_q: &[f64], weights: &[f64]) -> f64 {
    -log_q.iter().zip(weights).map(|(l, w)| w * l).sum::<f64>()
}

/// Differentiable evaluation of `log q(U | g(x0, xG, h))` for fixed `U`.
pub struct PosteriorPass {
    pub context: Vec<f64>,
    pub log_q: Vec<f64>,
    context_tape: MlpTape,
    flow_tape: FlowTape,
}

impl PosteriorPass {
    pub fn forward(context: &ContextNet, flow: &Flow, x0: &[f64], xg: &[f64], h: &[f64], u: &Mat) -> Result<Self> {
        let (c, context_tape) = context.forward_tape(x0, xg, h)?;
        let (log_q, flow_tape) = flow.log_prob_tape(u, Some(&Mat::broadcast_row(&c, u.rows)))?;
        Ok(PosteriorPass { context: c, log_q, context_tape, flow_tape })
    }

    /// Given `g[i] = dL/d log_q[i]`, accumulates gradients into the context
    /// network and the flow and returns `dL/dh`.
    pub fn backward(&self, context: &mut ContextNet, flow: &mut Flow, g: &[f64]) -> Vec<f64> {
        let grads = flow.backward(&self.flow_tape, g);
        let gc = grads.context.expect("conditional flow").column_sums();
        context.backward(&self.context_tape, &gc)
    }
}

/// Architecture of the full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub system: System,
    pub horizon: usize,
    pub vae: VaeConfig,
    pub context_dim: usize,
    pub context_hidden: usize,
    pub flow_depth: usize,
    pub flow_hidden: Vec<usize>,
}

impl ModelConfig {
    pub fn for_system(system: System) -> Self {
        let vae = VaeConfig::for_system(system);
        ModelConfig {
            system,
            horizon: HORIZON,
            context_dim: vae.h_dim,
            vae,
            context_hidden: 256,
            flow_depth: 10,
            flow_hidden: vec![128, 128],
        }
    }

    pub fn control_len(&self) -> usize {
        self.horizon * self.system.control_dim()
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig { dim: self.control_len(), depth: self.flow_depth, context_dim: self.context_dim, hidden: self.flow_hidden.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        if self.horizon == 0 || self.context_dim == 0 || self.context_hidden == 0 {
            return Err(Error::InvalidParams("horizon, context size and context hidden width must be positive".into()));
        }
        let space = self.system.space_dim();
        if self.vae.dim != space {
            return Err(Error::InvalidParams(format!("{} needs a {space}-D environment model, got {}-D", self.system.name(), self.vae.dim)));
        }
        self.flow_config().validate()
    }
}

/// Environment VAE, context network and control-sequence flow.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vae: Vae,
    pub context: ContextNet,
    pub flow: Flow,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let vae = Vae::new(config.vae.clone(), rng)?;
        let context = ContextNet::new(config.system.state_dim(), config.vae.h_dim, config.context_hidden, config.context_dim, rng);
        let flow = Flow::new(config.flow_config(), rng)?;
        Ok(Model { config, vae, context, flow })
    }

    /// Deterministic embedding (encoder mean).
    pub fn embed(&self, sdf: &crate::grid::SdfGrid) -> Result<Vec<f64>> {
        Ok(self.vae.encode::<ChaCha8Rng>(sdf, None)?.1)
    }

    /// Stores the parameters under `model.*` segments.
    pub fn write_segments(&self, ck: &mut Checkpoint) {
        ck.push("model.vae.encoder", self.vae.encoder.flat_values());
        ck.push("model.vae.decoder", self.vae.decoder.flat_values());
        ck.push("model.vae.prior", self.vae.prior.flat_values());
        ck.push("model.context", self.context.flat_values());
        ck.push("model.flow", self.flow.flat_values());
    }

    pub fn read_segments(config: ModelConfig, ck: &Checkpoint, path: &std::path::Path) -> Result<Self> {
        let mut model = Model::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let load = |name: &str, target: &mut dyn FnMut(&[f64]) -> std::result::Result<(), String>| -> Result<()> {
            let seg = ck.segment(name).ok_or_else(|| Error::format(path, format!("missing segment {name}")))?;
            target(seg).map_err(|e| Error::format(path, format!("segment {name}: {e}")))
        };
        load("model.vae.encoder", &mut |s| model.vae.encoder.load_flat(s))?;
        load("model.vae.decoder", &mut |s| model.vae.decoder.load_flat(s))?;
        load("model.vae.prior", &mut |s| model.vae.prior.load_flat(s))?;
        load("model.context", &mut |s| model.context.load_flat(s))?;
        load("model.flow", &mut |s| model.flow.load_flat(s))?;
        Ok(model)
    }

    /// Loads just the model from a training checkpoint.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let config: ModelConfig = serde_json::from_value(ck.meta["model"].clone())
            .map_err(|e| Error::format(path, format!("model config: {e}")))?;
        Self::read_segments(config, &ck, path)
    }
}

impl Parameterized for Model {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.vae.visit_params(f);
        self.context.visit_params(f);
        self.flow.visit_params(f);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.vae.visit_params_mut(f);
        self.context.visit_params_mut(f);
        self.flow.visit_params_mut(f);
    }
}

/// Context network and flow, stepped by one optimizer.
struct PosteriorParams<'m> {
    context: &'m mut ContextNet,
    flow: &'m mut Flow,
}

impl Parameterized for PosteriorParams<'_> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.context.visit_params(f);
        self.flow.visit_params(f);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.context.visit_params_mut(f);
        self.flow.visit_params_mut(f);
    }
}

/// Training hyperparameters and their per-epoch schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub beta: f64,
    /// Perturbation variance at epoch 0; decays linearly to zero.
    pub sigma_eps_start: f64,
    /// The VAE is trained jointly for this many epochs, then frozen.
    pub vae_epochs: usize,
    /// Weight of the VAE loss in the joint objective.
    pub vae_weight: f64,
    /// Posterior samples per environment per step.
    pub samples: usize,
    /// Environments per optimizer step.
    pub batch_envs: usize,
}

impl TrainSchedule {
    /// Full-length schedule.
    pub fn paper(system: System) -> Self {
        TrainSchedule {
            epochs: 1000,
            lr: 1e-3,
            lr_decay: 0.9,
            lr_decay_every: 50,
            alpha_start: 1.0,
            alpha_end: 500.0,
            beta: 1.0,
            sigma_eps_start: 1.0,
            vae_epochs: 100,
            vae_weight: 5.0,
            samples: match system {
                System::Planar => 64,
                System::Quadrotor => 32,
            },
            batch_envs: 16,
        }
    }

    /// The full schedule compressed to 200 epochs.
    pub fn desk(system: System) -> Self {
        TrainSchedule { epochs: 200, lr_decay_every: 10, vae_epochs: 20, ..Self::paper(system) }
    }

    /// Checks every field, reporting all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("epochs must be at least 1".to_string());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            errs.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            errs.push(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.lr_decay_every == 0 {
            errs.push("lr_decay_every must be at least 1".to_string());
        }
        if !(self.alpha_start > 0.0) || !(self.alpha_end > 0.0) || !self.alpha_start.is_finite() || !self.alpha_end.is_finite() {
            errs.push(format!("alpha must stay positive, got {} -> {}", self.alpha_start, self.alpha_end));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            errs.push(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.sigma_eps_start >= 0.0) || !self.sigma_eps_start.is_finite() {
            errs.push(format!("sigma_eps_start must be non-negative, got {}", self.sigma_eps_start));
        }
        if !(self.vae_weight >= 0.0) || !self.vae_weight.is_finite() {
            errs.push(format!("vae_weight must be non-negative, got {}", self.vae_weight));
        }
        if self.samples < 2 {
            errs.push(format!("samples must be at least 2, got {}", self.samples));
        }
        if self.batch_envs == 0 {
            errs.push("batch_envs must be at least 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(errs.join("; ")))
        }
    }

    pub fn alpha(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.alpha_start;
        }
        let t = (epoch.min(self.epochs - 1)) as f64 / (self.epochs - 1) as f64;
        self.alpha_start + (self.alpha_end - self.alpha_start) * t
    }

    pub fn sigma_eps(&self, epoch: usize) -> f64 {
        (self.sigma_eps_start * (1.0 - epoch as f64 / self.epochs as f64)).max(0.0)
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn vae_active(&self, epoch: usize) -> bool {
        epoch < self.vae_epochs
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub flow_loss: f64,
    /// Mean VAE loss, `NaN` once the VAE is frozen.
    #[serde(with = "nan_as_null")]
    pub vae_loss: f64,
    pub best_cost: f64,
    pub sigma_eps: f64,
    pub alpha: f64,
    pub lr: f64,
}

/// JSON has no NaN; store it as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,L_flow,L_VAE,mean_best_cost,sigma_eps,alpha,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.flow_loss, self.vae_loss, self.best_cost, self.sigma_eps, self.alpha, self.lr
        )
    }
}

/// Everything besides the model needed to resume training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub schedule: TrainSchedule,
    /// Next epoch to run.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub log: Vec<EpochMetrics>,
    pub dataset_fingerprint: String,
    pub prior_initialized: bool,
    #[serde(skip)]
    vae_opt: AdamState,
    #[serde(skip)]
    posterior_opt: AdamState,
}

/// Per-environment values that stay fixed while the VAE is frozen.
struct EnvCache {
    input: Vec<f64>,
    h: Option<Vec<f64>>,
}

pub struct Trainer {
    pub model: Model,
    pub state: TrainState,
    pub cost: CostParams,
    cache: Vec<Option<EnvCache>>,
}

struct EnvStep {
    flow_loss: f64,
    vae_loss: Option<f64>,
    best_cost: f64,
}

impl Trainer {
    pub fn new(model: Model, schedule: TrainSchedule, dataset_fingerprint: String, seed: u64) -> Result<Self> {
        schedule.validate()?;
        let cost = CostParams::for_system(model.config.system);
        Ok(Trainer {
            model,
            cost,
            state: TrainState {
                schedule,
                epoch: 0,
                rng: ChaCha8Rng::seed_from_u64(seed),
                log: Vec::new(),
                dataset_fingerprint,
                prior_initialized: false,
                vae_opt: AdamState::default(),
                posterior_opt: AdamState::default(),
            },
            cache: Vec::new(),
        })
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.state.schedule.epochs
    }

    fn check_envs(&self, envs: &[EnvRecord]) -> Result<()> {
        if envs.is_empty() {
            return Err(Error::InvalidParams("training needs at least one environment".into()));
        }
        for env in envs {
            if env.system != self.model.config.system {
                return Err(Error::InvalidParams(format!("environment {} is for {}", env.id, env.system.name())));
            }
            if env.tasks.is_empty() {
                return Err(Error::InvalidParams(format!("environment {} has no tasks", env.id)));
            }
        }
        Ok(())
    }

    fn cached(&mut self, envs: &[EnvRecord], i: usize) -> Result<&mut EnvCache> {
        if self.cache.len() != envs.len() {
            self.cache = (0..envs.len()).map(|_| None).collect();
        }
        if self.cache[i].is_none() {
            let input = self.model.vae.prepare(&envs[i].sdf)?;
            self.cache[i] = Some(EnvCache { input, h: None });
        }
        Ok(self.cache[i].as_mut().expect("filled"))
    }

    fn init_prior(&mut self, envs: &[EnvRecord], batch: &[usize]) -> Result<()> {
        if batch.len() >= 2 {
            let mut hs = Vec::with_capacity(batch.len() * self.model.vae.h_dim());
            for &i in batch {
                hs.extend(self.model.embed(&envs[i].sdf)?);
            }
            let h = Mat::from_vec(batch.len(), self.model.vae.h_dim(), hs);
            self.model.vae.prior.data_init(&h, None)?;
        }
        self.state.prior_initialized = true;
        Ok(())
    }

    /// Forward and backward pass for one environment, gradients scaled by `scale`.
    fn env_step(&mut self, envs: &[EnvRecord], i: usize, scale: f64) -> Result<EnvStep> {
        let epoch = self.state.epoch;
        let sched = self.state.schedule.clone();
        let vae_active = sched.vae_active(epoch);
        let env = &envs[i];
        let diverged = |reason: String| Error::Training { epoch, env: env.id, reason };
        let task_index = self.state.rng.random_range(0..env.tasks.len());
        let task = env.task(task_index);

        let (h, vae_fwd) = if vae_active {
            let input = self.cached(envs, i)?.input.clone();
            let fwd = self.model.vae.forward_train_prepared(input, &mut self.state.rng).map_err(|e| diverged(e.to_string()))?;
            (fwd.h.clone(), Some(fwd))
        } else {
            let model = &self.model;
            let entry = self.cache[i].as_mut().expect("filled by the caller");
            if entry.h.is_none() {
                entry.h = Some(model.vae.embed_prepared(&entry.input));
            }
            (entry.h.clone().expect("filled"), None)
        };

        let (x0, xg) = (task.start.as_slice(), task.goal.as_slice());
        let ctx = self.model.context.forward(x0, xg, &h)?;
        let u = perturbed_controls(&self.model.flow, &ctx, sched.sigma_eps(epoch), sched.samples, &mut self.state.rng)
            .map_err(|e| diverged(e.to_string()))?;
        let pass = PosteriorPass::forward(&self.model.context, &self.model.flow, x0, xg, &h, &u).map_err(|e| diverged(e.to_string()))?;
        let costs = rollout_costs(&task, &task.start, &u.data, u.cols, &self.cost);
        let weights = importance_weights(&pass.log_q, &costs, sched.alpha(epoch), sched.beta).map_err(|e| diverged(e.to_string()))?;
        let flow_loss = flow_nll_loss(&pass.log_q, &weights);
        let vae_loss = vae_fwd.as_ref().map(|f| f.loss.total);
        let total = flow_loss + vae_loss.map_or(0.0, |l| sched.vae_weight * l);
        if !total.is_finite() {
            return Err(diverged(format!("non-finite loss (flow {flow_loss}, vae {vae_loss:?})")));
        }

        let g: Vec<f64> = weights.iter().map(|w| -w * scale).collect();
        let gh = pass.backward(&mut self.model.context, &mut self.model.flow, &g);
        if let Some(fwd) = vae_fwd {
            self.model.vae.backward_train(&fwd, sched.vae_weight * scale, Some(&gh));
        }
        let best_cost = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(EnvStep { flow_loss, vae_loss, best_cost })
    }

    /// Runs one epoch over `envs` in shuffled minibatches.
    pub fn run_epoch(&mut self, envs: &[EnvRecord]) -> Result<EpochMetrics> {
        self.check_envs(envs)?;
        if self.finished() {
            return Err(Error::InvalidParams("the schedule is already complete".into()));
        }
        let epoch = self.state.epoch;
        let sched = self.state.schedule.clone();
        let mut order: Vec<usize> = (0..envs.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut self.state.rng);
        let vae_active = sched.vae_active(epoch);
        let lr = sched.lr(epoch);
        let mut vae_opt = Adam { state: std::mem::take(&mut self.state.vae_opt), ..Adam::new(lr) };
        let mut post_opt = Adam { state: std::mem::take(&mut self.state.posterior_opt), ..Adam::new(lr) };

        let (mut flow_sum, mut vae_sum, mut best_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(sched.batch_envs) {
            if !self.state.prior_initialized {
                self.init_prior(envs, batch)?;
            }
            for &i in batch {
                self.cached(envs, i)?;
            }
            self.model.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let step = self.env_step(envs, i, scale)?;
                flow_sum += step.flow_loss;
                vae_sum += step.vae_loss.unwrap_or(0.0);
                best_sum += step.best_cost;
            }
            post_opt.step(&mut PosteriorParams { context: &mut self.model.context, flow: &mut self.model.flow });
            if vae_active {
                vae_opt.step(&mut self.model.vae);
            }
        }
        self.state.vae_opt = vae_opt.state;
        self.state.posterior_opt = post_opt.state;
        let n = envs.len() as f64;
        let metrics = EpochMetrics {
            epoch,
            flow_loss: flow_sum / n,
            vae_loss: if vae_active { vae_sum / n } else { f64::NAN },
            best_cost: best_sum / n,
            sigma_eps: sched.sigma_eps(epoch),
            alpha: sched.alpha(epoch),
            lr,
        };
        self.state.log.push(metrics.clone());
        self.state.epoch += 1;
        Ok(metrics)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(serde_json::json!({
            "model": serde_json::to_value(&self.model.config)?,
            "cost": serde_json::to_value(self.cost)?,
            "train": serde_json::to_value(&self.state)?,
            "vae_opt_step": self.state.vae_opt.step,
            "posterior_opt_step": self.state.posterior_opt.step,
        }));
        self.model.write_segments(&mut ck);
        ck.push("opt.vae.m", self.state.vae_opt.m.clone());
        ck.push("opt.vae.v", self.state.vae_opt.v.clone());
        ck.push("opt.posterior.m", self.state.posterior_opt.m.clone());
        ck.push("opt.posterior.v", self.state.posterior_opt.v.clone());
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &std::path::Path) -> Result<Self> {
        let bad = |what: &str, e: serde_json::Error| Error::format(path, format!("{what}: {e}"));
        let config: ModelConfig = serde_json::from_value(ck.meta["model"].clone()).map_err(|e| bad("model config", e))?;
        let cost: CostParams = serde_json::from_value(ck.meta["cost"].clone()).map_err(|e| bad("cost parameters", e))?;
        let mut state: TrainState = serde_json::from_value(ck.meta["train"].clone()).map_err(|e| bad("training state", e))?;
        state.schedule.validate()?;
        let model = Model::read_segments(config, ck, path)?;
        let seg = |name: &str| ck.segment(name).map(|s| s.to_vec()).unwrap_or_default();
        let step = |name: &str| ck.meta[name].as_u64().unwrap_or(0);
        state.vae_opt = AdamState { step: step("vae_opt_step"), m: seg("opt.vae.m"), v: seg("opt.vae.v") };
        state.posterior_opt = AdamState { step: step("posterior_opt_step"), m: seg("opt.posterior.m"), v: seg("opt.posterior.v") };
        Ok(Trainer { model, state, cost, cache: Vec::new() })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}
