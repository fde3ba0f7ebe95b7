//! Sampling-based MPC: MPPI, iCEM, FlowMPPI and FlowMPPIProject, plus the
//! closed-loop trial runner.

mod noise;

pub use noise::ColoredNoise;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, goal_distance, in_collision, rollout_costs, CostParams, State, System, Task, HORIZON};
use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::nn::{Mat, Parameterized};
use crate::posterior::{importance_weights, perturbed_controls, ContextNet, Model, PosteriorPass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControllerKind {
    #[serde(rename = "mppi")]
    Mppi,
    #[serde(rename = "icem")]
    Icem,
    #[serde(rename = "flowmppi")]
    FlowMppi,
    #[serde(rename = "flowmppi_project")]
    FlowMppiProject,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Mppi => "MPPI",
            ControllerKind::Icem => "iCEM",
            ControllerKind::FlowMppi => "FlowMPPI",
            ControllerKind::FlowMppiProject => "FlowMPPIProject",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, ControllerKind::FlowMppi | ControllerKind::FlowMppiProject)
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "mppi" => Ok(ControllerKind::Mppi),
            "icem" => Ok(ControllerKind::Icem),
            "flowmppi" => Ok(ControllerKind::FlowMppi),
            "flowmppiproject" => Ok(ControllerKind::FlowMppiProject),
            _ => Err(Error::InvalidParams(format!("unknown controller {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MppiParams {
    pub lambda: f64,
    /// Diagonal control-noise covariance.
    pub sigma: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcemParams {
    /// Initial per-step variance of the sampling distribution.
    pub sigma: f64,
    pub noise_exponent: f64,
    pub elite_fraction: f64,
    pub kept_fraction: f64,
    pub iterations: usize,
    pub momentum: f64,
}

/// Which terms the projection descends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionLoss {
    Both,
    OodOnly,
    FlowOnly,
}

impl ProjectionLoss {
    pub fn label(self) -> &'static str {
        match self {
            ProjectionLoss::Both => "L_OOD+L_flow",
            ProjectionLoss::OodOnly => "L_OOD",
            ProjectionLoss::FlowOnly => "L_flow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionParams {
    /// Gradient steps on the first call.
    pub initial_steps: usize,
    pub lr: f64,
    /// Weight of the OOD term.
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Perturbation variance of the projection samples.
    pub sigma_eps: f64,
    pub loss: ProjectionLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    /// Rollout budget per timestep.
    pub samples: usize,
    pub mppi: MppiParams,
    pub icem: IcemParams,
    pub flow_mppi: MppiParams,
    pub projection: ProjectionParams,
}

impl ControllerConfig {
    pub fn for_system(system: System, kind: ControllerKind, samples: usize) -> Self {
        let (planar, b) = match system {
            System::Planar => (true, 1.0 / 64.0),
            System::Quadrotor => (false, 1.0 / 1024.0),
        };
        ControllerConfig {
            kind,
            samples,
            mppi: MppiParams { lambda: 1.0, sigma: if planar { 0.9 } else { 0.5 }, iterations: if planar { 1 } else { 4 } },
            icem: IcemParams {
                sigma: if planar { 0.75 } else { 0.5 },
                noise_exponent: if planar { 2.5 } else { 3.0 },
                elite_fraction: 0.1,
                kept_fraction: if planar { 0.3 } else { 0.5 },
                iterations: 4,
                momentum: 0.1,
            },
            flow_mppi: MppiParams { lambda: 1.0, sigma: if planar { 1.0 } else { 0.75 }, iterations: if planar { 1 } else { 2 } },
            projection: ProjectionParams {
                initial_steps: 10,
                lr: 1e-2,
                b,
                alpha: 500.0,
                beta: 1.0,
                sigma_eps: 0.0,
                loss: ProjectionLoss::Both,
            },
        }
    }

    /// Rollouts available to the FlowMPPI update itself.
    fn flow_budget(&self) -> usize {
        match self.kind {
            ControllerKind::FlowMppiProject => self.samples - self.samples / 2,
            _ => self.samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let k = self.samples;
        if k < 2 {
            errs.push(format!("samples must be at least 2, got {k}"));
        }
        let mppi_ok = |name: &str, p: &MppiParams, errs: &mut Vec<String>| {
            if !(p.lambda > 0.0) || !p.lambda.is_finite() {
                errs.push(format!("{name}.lambda must be positive, got {}", p.lambda));
            }
            if !(p.sigma >= 0.0) || !p.sigma.is_finite() {
                errs.push(format!("{name}.sigma must be non-negative, got {}", p.sigma));
            }
            if p.iterations == 0 {
                errs.push(format!("{name}.iterations must be at least 1"));
            }
        };
        mppi_ok("mppi", &self.mppi, &mut errs);
        mppi_ok("flow_mppi", &self.flow_mppi, &mut errs);
        let c = &self.icem;
        for (name, v) in [("elite_fraction", c.elite_fraction), ("kept_fraction", c.kept_fraction)] {
            if !(v > 0.0 && v <= 1.0) {
                errs.push(format!("icem.{name} must lie in (0, 1], got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&c.momentum) {
            errs.push(format!("icem.momentum must lie in [0, 1], got {}", c.momentum));
        }
        if c.iterations == 0 || !(c.sigma > 0.0) || !c.noise_exponent.is_finite() {
            errs.push("icem needs iterations >= 1, sigma > 0 and a finite noise exponent".to_string());
        }
        let p = &self.projection;
        if !(p.lr >= 0.0) || !(p.b >= 0.0) || !(p.alpha > 0.0) || !(p.beta >= 0.0) || !(p.sigma_eps >= 0.0) {
            errs.push("projection needs lr >= 0, b >= 0, alpha > 0, beta >= 0 and sigma_eps >= 0".to_string());
        }
        match self.kind {
            ControllerKind::Mppi if k / self.mppi.iterations < 1 => {
                errs.push("mppi needs at least one sample per iteration".to_string())
            }
            ControllerKind::Icem if k / c.iterations.max(1) < 1 => {
                errs.push("icem needs at least one sample per iteration".to_string())
            }
            ControllerKind::FlowMppi | ControllerKind::FlowMppiProject if self.flow_budget() / self.flow_mppi.iterations < 2 => {
                errs.push("flowmppi needs at least two samples per iteration".to_string())
            }
            _ => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(errs.join("; ")))
        }
    }
}

/// Cost evaluation for one task with central rollout counting.
pub struct Rollouts<'t> {
    pub task: &'t Task,
    pub params: CostParams,
    pub count: usize,
}

impl<'t> Rollouts<'t> {
    pub fn new(task: &'t Task) -> Self {
        Rollouts { task, params: CostParams::for_system(task.system), count: 0 }
    }

    pub fn costs(&mut self, x0: &State, flat: &[f64], seq_len: usize) -> Vec<f64> {
        self.count += flat.len() / seq_len;
        rollout_costs(self.task, x0, flat, seq_len, &self.params)
    }
}

/// What a step did, for diagnostics and budget audits.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub rollouts: usize,
    pub min_cost: f64,
    /// FlowMPPI: whether the lowest total cost came from the flow half.
    pub best_from_flow: Option<bool>,
    /// The latent map of the nominal failed and only the perturbation half ran.
    pub fallback: bool,
    /// Every rollout was invalid; the shifted nominal was kept.
    pub all_invalid: bool,
    /// Mean per-dimension OOD score of the current embedding.
    pub ood_score: Option<f64>,
    /// A projection gradient was non-finite and its update was skipped.
    pub projection_flagged: bool,
}

/// Drops the first control and appends one drawn from `N(0, sigma I)`.
pub fn shift<R: Rng + ?Sized>(u: &mut [f64], control_dim: usize, sigma: f64, rng: &mut R) {
    let n = u.len();
    if n == 0 {
        return;
    }
    u.copy_within(control_dim.., 0);
    let std = sigma.sqrt();
    for v in &mut u[n - control_dim..] {
        *v = std * rng.sample::<f64, _>(StandardNormal);
    }
}

/// `w_k ∝ exp(-(S_k - min S) / lambda)`, normalized to sum to one.
/// Non-finite costs get zero weight; `None` if none is finite.
pub fn softmin_weights(s: &[f64], lambda: f64) -> Option<Vec<f64>> {
    let base = s.iter().cloned().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    if !base.is_finite() {
        return None;
    }
    let mut w: Vec<f64> = s.iter().map(|v| if v.is_finite() { (-(v - base) / lambda).exp() } else { 0.0 }).collect();
    let eta: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= eta;
    }
    Some(w)
}

fn normals<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Candidate set of one update: sequences and their total costs `S_k`.
struct Candidates {
    u: Vec<f64>,
    s: Vec<f64>,
    /// Index where the flow half starts, if any.
    flow_from: Option<usize>,
}

impl Candidates {
    fn new(capacity: usize, len: usize) -> Self {
        Candidates { u: Vec::with_capacity(capacity * len), s: Vec::with_capacity(capacity), flow_from: None }
    }
}

/// Control-space half: `U_k = U + eps`, `S_k = J + lambda <U_k, Sigma^-1 eps>`.
fn perturbation_half<R: Rng + ?Sized>(
    nominal: &[f64],
    p: &MppiParams,
    n: usize,
    x: &State,
    rng: &mut R,
    ev: &mut Rollouts,
    out: &mut Candidates,
) {
    let len = nominal.len();
    let eps = normals(n * len, p.sigma.sqrt(), rng);
    let mut u = Vec::with_capacity(n * len);
    for e in eps.chunks(len) {
        u.extend(nominal.iter().zip(e).map(|(a, b)| a + b));
    }
    let j = ev.costs(x, &u, len);
    for (k, jk) in j.iter().enumerate() {
        let uk = &u[k * len..(k + 1) * len];
        let ek = &eps[k * len..(k + 1) * len];
        let penalty = if p.sigma > 0.0 { p.lambda * dot(uk, ek) / p.sigma } else { 0.0 };
        out.s.push(jk + penalty);
    }
    out.u.extend_from_slice(&u);
}

/// Replaces `nominal` by the softmin-weighted candidate average.
fn apply_update(nominal: &mut [f64], c: &Candidates, lambda: f64, diag: &mut StepDiagnostics) {
    let len = nominal.len();
    let Some(w) = softmin_weights(&c.s, lambda) else {
        diag.all_invalid = true;
        diag.min_cost = f64::INFINITY;
        return;
    };
    let mut next = vec![0.0; len];
    for (k, wk) in w.iter().enumerate() {
        if *wk > 0.0 {
            for (n, v) in next.iter_mut().zip(&c.u[k * len..(k + 1) * len]) {
                *n += wk * v;
            }
        }
    }
    nominal.copy_from_slice(&next);
    let (best, min) = c.s.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc });
    diag.min_cost = min;
    diag.best_from_flow = c.flow_from.map(|f| best >= f);
}

fn per_iteration(budget: usize, iterations: usize) -> usize {
    budget / iterations.max(1)
}

/// MPPI update of an already shifted nominal with `k` rollouts split over
/// the iterations.
pub fn mppi_step<R: Rng + ?Sized>(
    x: &State,
    nominal: &mut [f64],
    p: &MppiParams,
    k: usize,
    rng: &mut R,
    ev: &mut Rollouts,
) -> StepDiagnostics {
    let start = ev.count;
    let mut diag = StepDiagnostics::default();
    let n = per_iteration(k, p.iterations);
    for _ in 0..p.iterations {
        let mut c = Candidates::new(n, nominal.len());
        perturbation_half(nominal, p, n, x, rng, ev, &mut c);
        apply_update(nominal, &c, p.lambda, &mut diag);
    }
    diag.rollouts = ev.count - start;
    diag
}

/// Context-conditioned posterior used by the flow controllers.
#[derive(Clone, Copy)]
pub struct PosteriorRef<'m> {
    pub context: &'m ContextNet,
    pub flow: &'m Flow,
    /// Environment prior, for OOD scores and projection.
    pub prior: &'m Flow,
}

impl Model {
    pub fn posterior(&self) -> PosteriorRef<'_> {
        PosteriorRef { context: &self.context, flow: &self.flow, prior: &self.vae.prior }
    }
}

/// FlowMPPI update of an already shifted nominal: half of each iteration's
/// samples perturb the nominal, half come from the posterior with the
/// latent cost `lambda <eps_Z, Z - eps_Z>`, `Z = f^-1(U, C)`.
#[allow(clippy::too_many_arguments)]
pub fn flowmppi_step<R: Rng + ?Sized>(
    x: &State,
    nominal: &mut [f64],
    ctx: &[f64],
    flow: &Flow,
    p: &MppiParams,
    k: usize,
    rng: &mut R,
    ev: &mut Rollouts,
) -> StepDiagnostics {
    let start = ev.count;
    let len = nominal.len();
    let mut diag = StepDiagnostics::default();
    let n = per_iteration(k, p.iterations);
    let n_pert = n / 2;
    let n_flow = n - n_pert;
    let ctx1 = Mat::broadcast_row(ctx, 1);
    for _ in 0..p.iterations {
        let mut c = Candidates::new(n, len);
        let latent = flow.inverse(&Mat::from_vec(1, len, nominal.to_vec()), Some(&ctx1)).ok().map(|(z, _)| z.data);
        perturbation_half(nominal, p, n_pert, x, rng, ev, &mut c);
        match latent {
            Some(z) => {
                let eps_z = Mat::from_vec(n_flow, len, normals(n_flow * len, 1.0, rng));
                match flow.forward(&eps_z, Some(&Mat::broadcast_row(ctx, n_flow))) {
                    Ok((u, _)) => {
                        let j = ev.costs(x, &u.data, len);
                        c.flow_from = Some(c.s.len());
                        for (r, jk) in j.iter().enumerate() {
                            let e = eps_z.row(r);
                            let latent_cost: f64 = e.iter().zip(&z).map(|(ei, zi)| ei * (zi - ei)).sum();
                            c.s.push(jk + p.lambda * latent_cost);
                        }
                        c.u.extend_from_slice(&u.data);
                    }
                    Err(_) => diag.fallback = true,
                }
            }
            None => diag.fallback = true,
        }
        apply_update(nominal, &c, p.lambda, &mut diag);
    }
    diag.rollouts = ev.count - start;
    diag
}

/// Sampling distribution and kept elites carried across iCEM iterations
/// and timesteps.
#[derive(Debug, Clone)]
pub struct IcemState {
    pub mean: Vec<f64>,
    pub elites: Vec<Vec<f64>>,
    noise: ColoredNoise,
    control_dim: usize,
}

impl IcemState {
    pub fn new(horizon: usize, control_dim: usize, exponent: f64) -> Self {
        IcemState {
            mean: vec![0.0; horizon * control_dim],
            elites: Vec::new(),
            noise: ColoredNoise::new(horizon, exponent),
            control_dim,
        }
    }

    /// Advances one timestep: the mean and kept elites move forward with a
    /// zero control appended.
    pub fn shift(&mut self) {
        let du = self.control_dim;
        for seq in std::iter::once(&mut self.mean).chain(self.elites.iter_mut()) {
            let n = seq.len();
            seq.copy_within(du.., 0);
            seq[n - du..].fill(0.0);
        }
    }

    /// One colored-noise draw, independent per control channel.
    fn colored<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let du = self.control_dim;
        let t = self.noise.len();
        let mut out = vec![0.0; t * du];
        for ch in 0..du {
            for (i, v) in self.noise.sample(rng).into_iter().enumerate() {
                out[i * du + ch] = v;
            }
        }
        out
    }
}

const ICEM_STD_FLOOR: f64 = 1e-3;

/// Indices of the `m` lowest costs; ties keep sample order.
fn elite_indices(costs: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..costs.len()).collect();
    idx.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]));
    idx.truncate(m);
    idx
}

/// One iCEM timestep; returns the best sequence found.
pub fn icem_step<R: Rng + ?Sized>(
    x: &State,
    state: &mut IcemState,
    p: &IcemParams,
    k: usize,
    rng: &mut R,
    ev: &mut Rollouts,
) -> (Vec<f64>, StepDiagnostics) {
    let start = ev.count;
    let len = state.mean.len();
    let n = per_iteration(k, p.iterations);
    let n_elite = ((n as f64 * p.elite_fraction).ceil() as usize).clamp(1, n);
    let mut std = vec![p.sigma.sqrt(); len];
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..p.iterations {
        let n_kept = ((state.elites.len() as f64 * p.kept_fraction).round() as usize).min(state.elites.len()).min(n);
        let mut u = Vec::with_capacity(n * len);
        for e in state.elites.iter().take(n_kept) {
            u.extend_from_slice(e);
        }
        for _ in n_kept..n {
            let c = state.colored(rng);
            u.extend(state.mean.iter().zip(&std).zip(&c).map(|((m, s), z)| m + s * z));
        }
        let costs = ev.costs(x, &u, len);
        let elites = elite_indices(&costs, n_elite);
        let mut mean_new = vec![0.0; len];
        for &i in &elites {
            for (m, v) in mean_new.iter_mut().zip(&u[i * len..(i + 1) * len]) {
                *m += v / elites.len() as f64;
            }
        }
        let mut var_new = vec![0.0; len];
        for &i in &elites {
            for ((s, v), m) in var_new.iter_mut().zip(&u[i * len..(i + 1) * len]).zip(&mean_new) {
                *s += (v - m).powi(2) / elites.len() as f64;
            }
        }
        for j in 0..len {
            state.mean[j] = p.momentum * state.mean[j] + (1.0 - p.momentum) * mean_new[j];
            let s_new = var_new[j].sqrt();
            std[j] = (p.momentum * std[j] + (1.0 - p.momentum) * s_new).max(ICEM_STD_FLOOR);
        }
        let top = elites[0];
        if costs[top].is_finite() && best.as_ref().is_none_or(|(c, _)| costs[top] < *c) {
            best = Some((costs[top], u[top * len..(top + 1) * len].to_vec()));
        }
        state.elites = elites.iter().map(|&i| u[i * len..(i + 1) * len].to_vec()).collect();
    }
    let mut diag = StepDiagnostics { rollouts: ev.count - start, ..Default::default() };
    let plan = match best {
        Some((c, u)) => {
            diag.min_cost = c;
            u
        }
        None => {
            diag.all_invalid = true;
            diag.min_cost = f64::INFINITY;
            state.mean.clone()
        }
    };
    (plan, diag)
}

/// Owned copies of the networks for gradient evaluation during projection.
#[derive(Debug, Clone)]
pub struct Projector {
    context: ContextNet,
    flow: Flow,
    prior: Flow,
}

/// Result of one projection step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionStep {
    pub ood_loss: f64,
    pub flow_loss: f64,
    pub flagged: bool,
}

impl Projector {
    pub fn new(post: PosteriorRef<'_>) -> Self {
        Projector { context: post.context.clone(), flow: post.flow.clone(), prior: post.prior.clone() }
    }

    /// One gradient step of `h` on `b * (-log p(h)) + L_flow`, with
    /// `L_flow` estimated from `k` fresh posterior samples rolled out in the
    /// true environment. A non-finite gradient leaves `h` unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        h: &mut [f64],
        x: &State,
        goal: &State,
        p: &ProjectionParams,
        k: usize,
        rng: &mut R,
        ev: &mut Rollouts,
    ) -> ProjectionStep {
        let hd = h.len();
        let mut grad = vec![0.0; hd];
        let mut out = ProjectionStep { ood_loss: f64::NAN, flow_loss: f64::NAN, flagged: false };
        let flag = |mut out: ProjectionStep| {
            out.flagged = true;
            out
        };
        if p.loss != ProjectionLoss::FlowOnly {
            let Ok((lp, tape)) = self.prior.log_prob_tape(&Mat::from_vec(1, hd, h.to_vec()), None) else {
                return flag(out);
            };
            out.ood_loss = -lp[0];
            let g = self.prior.backward(&tape, &[-p.b]);
            for (a, b) in grad.iter_mut().zip(&g.data.data) {
                *a += b;
            }
            self.prior.zero_grad();
        }
        if p.loss != ProjectionLoss::OodOnly && k > 0 {
            let (x0, xg) = (x.as_slice(), goal.as_slice());
            let Ok(ctx) = self.context.forward(x0, xg, h) else {
                return flag(out);
            };
            let Ok(u) = perturbed_controls(&self.flow, &ctx, p.sigma_eps, k, rng) else {
                return flag(out);
            };
            let Ok(pass) = PosteriorPass::forward(&self.context, &self.flow, x0, xg, h, &u) else {
                return flag(out);
            };
            let costs = ev.costs(x, &u.data, u.cols);
            let Ok(w) = importance_weights(&pass.log_q, &costs, p.alpha, p.beta) else {
                return flag(out);
            };
            out.flow_loss = crate::posterior::flow_nll_loss(&pass.log_q, &w);
            let g: Vec<f64> = w.iter().map(|v| -v).collect();
            let gh = pass.backward(&mut self.context, &mut self.flow, &g);
            self.context.zero_grad();
            self.flow.zero_grad();
            for (a, b) in grad.iter_mut().zip(&gh) {
                *a += b;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return flag(out);
        }
        for (v, g) in h.iter_mut().zip(&grad) {
            *v -= p.lr * g;
        }
        out
    }
}

/// Runs `steps` projection steps sharing a budget of `k` rollouts.
/// Returns the final embedding and whether any step was flagged.
#[allow(clippy::too_many_arguments)]
pub fn project<R: Rng + ?Sized>(
    h: &[f64],
    x: &State,
    goal: &State,
    projector: &mut Projector,
    p: &ProjectionParams,
    steps: usize,
    k: usize,
    rng: &mut R,
    ev: &mut Rollouts,
) -> (Vec<f64>, bool) {
    let mut h = h.to_vec();
    let mut flagged = false;
    if steps == 0 {
        return (h, false);
    }
    let per = k / steps;
    for _ in 0..steps {
        flagged |= projector.step(&mut h, x, goal, p, per, rng, ev).flagged;
    }
    (h, flagged)
}

/// A controller bound to one task, carrying its plan across timesteps.
pub struct Planner<'m> {
    pub config: ControllerConfig,
    pub goal: State,
    pub nominal: Vec<f64>,
    /// Current environment embedding (projected for FlowMPPIProject).
    pub h: Option<Vec<f64>>,
    control_dim: usize,
    posterior: Option<PosteriorRef<'m>>,
    projector: Option<Projector>,
    icem: Option<IcemState>,
    first: bool,
}

/// Outcome of one planning step.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanStep {
    pub control: Vec<f64>,
    pub diagnostics: StepDiagnostics,
}

impl<'m> Planner<'m> {
    /// `posterior` and `h` are required by the flow controllers.
    pub fn new(
        config: ControllerConfig,
        task: &Task,
        horizon: usize,
        posterior: Option<PosteriorRef<'m>>,
        h: Option<Vec<f64>>,
    ) -> Result<Self> {
        config.validate()?;
        if config.kind.needs_model() && (posterior.is_none() || h.is_none()) {
            return Err(Error::InvalidParams(format!("{} needs a trained model", config.kind.name())));
        }
        let du = task.system.control_dim();
        if let Some(post) = posterior.filter(|_| config.kind.needs_model()) {
            if post.flow.dim() != horizon * du {
                return Err(Error::Shape {
                    expected: format!("a flow over {} controls", horizon * du),
                    got: format!("{}", post.flow.dim()),
                });
            }
        }
        let icem = (config.kind == ControllerKind::Icem).then(|| IcemState::new(horizon, du, config.icem.noise_exponent));
        let projector = (config.kind == ControllerKind::FlowMppiProject).then(|| Projector::new(posterior.expect("checked")));
        Ok(Planner {
            goal: task.goal,
            nominal: vec![0.0; horizon * du],
            h,
            control_dim: du,
            posterior,
            projector,
            icem,
            first: true,
            config,
        })
    }

    /// Builds a planner for `task`, embedding its environment with `model`
    /// when the controller needs one.
    pub fn for_task(config: ControllerConfig, task: &Task, model: Option<&'m Model>) -> Result<Self> {
        match model.filter(|_| config.kind.needs_model()) {
            Some(m) => {
                let h = m.embed(&task.sdf)?;
                Planner::new(config, task, m.config.horizon, Some(m.posterior()), Some(h))
            }
            None => Planner::new(config, task, HORIZON, None, None),
        }
    }

    pub fn step<R: Rng + ?Sized>(&mut self, x: &State, rng: &mut R, ev: &mut Rollouts) -> Result<PlanStep> {
        let start = ev.count;
        let du = self.control_dim;
        let k = self.config.samples;
        let mut diag = match self.config.kind {
            ControllerKind::Mppi => {
                shift(&mut self.nominal, du, self.config.mppi.sigma, rng);
                mppi_step(x, &mut self.nominal, &self.config.mppi, k, rng, ev)
            }
            ControllerKind::Icem => {
                let state = self.icem.as_mut().expect("built for icem");
                if !self.first {
                    state.shift();
                }
                let (plan, diag) = icem_step(x, state, &self.config.icem, k, rng, ev);
                self.nominal = plan;
                diag
            }
            ControllerKind::FlowMppi | ControllerKind::FlowMppiProject => {
                let post = self.posterior.expect("checked at construction");
                let mut flagged = false;
                if let Some(projector) = self.projector.as_mut() {
                    let p = self.config.projection;
                    let steps = if self.first { p.initial_steps } else { 1 };
                    let h = self.h.as_ref().expect("checked");
                    let (h, f) = project(h, x, &self.goal, projector, &p, steps, k / 2, rng, ev);
                    self.h = Some(h);
                    flagged = f;
                }
                let h = self.h.as_ref().expect("checked");
                let ctx = post.context.forward(x.as_slice(), self.goal.as_slice(), h)?;
                shift(&mut self.nominal, du, self.config.flow_mppi.sigma, rng);
                let budget = self.config.flow_budget();
                let mut diag = flowmppi_step(x, &mut self.nominal, &ctx, post.flow, &self.config.flow_mppi, budget, rng, ev);
                diag.projection_flagged = flagged;
                diag.ood_score = crate::vae::ood_score(h, post.prior).ok();
                diag
            }
        };
        self.first = false;
        diag.rollouts = ev.count - start;
        debug_assert!(diag.rollouts <= k, "{} rollouts over a budget of {k}", diag.rollouts);
        Ok(PlanStep { control: self.nominal[..du].to_vec(), diagnostics: diag })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Collision,
    Timeout,
    Numerical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub success: bool,
    /// Running cost of the executed controls and visited states.
    pub executed_cost: f64,
    pub steps: usize,
    pub failure: Option<FailureKind>,
    /// Largest number of rollouts used in any timestep.
    pub max_rollouts: usize,
}

/// Closed loop: plan, apply the first control, advance, check collision and
/// goal. The executed cost adds, per step, the control prior of the applied
/// control and the running goal and collision terms of the new state.
pub fn run_trial(task: &Task, planner: &mut Planner<'_>, max_steps: usize, seed: u64) -> TrialResult {
    run_trial_traced(task, planner, max_steps, seed, None)
}

/// Visited states and the controls that produced them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub states: Vec<State>,
    pub controls: Vec<Vec<f64>>,
}

/// `run_trial`, optionally recording the executed trajectory.
pub fn run_trial_traced(task: &Task, planner: &mut Planner<'_>, max_steps: usize, seed: u64, mut trace: Option<&mut Trace>) -> TrialResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ev = Rollouts::new(task);
    let params = ev.params;
    let mut x = task.start;
    if let Some(t) = trace.as_deref_mut() {
        t.states.push(x);
    }
    let mut result = TrialResult { success: false, executed_cost: 0.0, steps: 0, failure: None, max_rollouts: 0 };
    if in_collision(&task.sdf, &x) {
        result.failure = Some(FailureKind::Collision);
        return result;
    }
    if task.in_goal(&x, &params) {
        result.success = true;
        return result;
    }
    for _ in 0..max_steps {
        let step = match planner.step(&x, &mut rng, &mut ev) {
            Ok(s) => s,
            Err(_) => {
                result.failure = Some(FailureKind::Numerical);
                return result;
            }
        };
        result.max_rollouts = result.max_rollouts.max(step.diagnostics.rollouts);
        x = match dynamics::step(task.system, &x, &step.control) {
            Ok(next) if next.is_finite() => next,
            _ => {
                result.failure = Some(FailureKind::Numerical);
                return result;
            }
        };
        result.steps += 1;
        if let Some(t) = trace.as_deref_mut() {
            t.states.push(x);
            t.controls.push(step.control.clone());
        }
        let collided = in_collision(&task.sdf, &x);
        result.executed_cost += params.control_weight() * step.control.iter().map(|u| u * u).sum::<f64>()
            + params.running_weight * goal_distance(&x, &task.goal)
            + if collided { params.collision_weight } else { 0.0 };
        if collided {
            result.failure = Some(FailureKind::Collision);
            return result;
        }
        if task.in_goal(&x, &params) {
            result.success = true;
            return result;
        }
    }
    result.failure = Some(FailureKind::Timeout);
    result
}
