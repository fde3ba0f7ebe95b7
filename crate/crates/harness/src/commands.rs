//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use flowmpc::controllers::{run_trial_traced, ControllerKind, Planner, ProjectionLoss, Trace};
use flowmpc::dataset::{generate_env, read_dataset, write_dataset, DatasetMeta, EnvRecord};
use flowmpc::envgen::{ingest_points, read_points_ascii, read_points_binary, EnvKind};
use flowmpc::grid::GridSpec;
use flowmpc::posterior::{EpochMetrics, Model, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Config, PointFormat};
use crate::report::{auroc, histogram_svg, results_csv, results_table, ResultRow, TrialRecord};

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `task_id` in a suite; shared by every controller and budget.
pub fn trial_seed(suite_seed: u64, task_id: usize) -> u64 {
    mix(suite_seed ^ mix(task_id as u64))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn generate(config: &Config, kind: EnvKind, count: usize, seed: u64, tasks_per_env: usize) -> Result<Vec<EnvRecord>> {
    let spec = config.data.gen_spec(config.system, kind, count, seed, tasks_per_env);
    (0..count)
        .into_par_iter()
        .map(|i| generate_env(&spec, i).map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()
        .with_context(|| format!("generating {count} {kind:?} environments"))
}

pub fn gen_data(config: &Config, seed: u64, out: &Path) -> Result<DatasetMeta> {
    let d = &config.data;
    let envs = generate(config, d.kind, d.count, seed, d.tasks_per_env)?;
    let spec = d.gen_spec(config.system, d.kind, d.count, seed, d.tasks_per_env);
    Ok(write_dataset(out, &envs, Some(spec))?)
}

pub fn ingest(config: &Config, seed: u64, out: &Path, input: Option<&Path>) -> Result<serde_json::Value> {
    let ic = &config.ingest;
    let input = input
        .map(Path::to_path_buf)
        .or_else(|| ic.input.clone())
        .ok_or_else(|| anyhow!("no point file given (use --input or ingest.input)"))?;
    let binary = match ic.format {
        PointFormat::Ascii => false,
        PointFormat::Binary => true,
        PointFormat::Auto => input.extension().is_some_and(|e| e == "bin"),
    };
    let points = if binary { read_points_binary(&input)? } else { read_points_ascii(&input)? };
    let grid = GridSpec::with_origin(config.system.space_dim(), ic.cells, ic.extent, ic.origin)?;
    let (occ, report) = ingest_points(&points, grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rec = EnvRecord::from_occupancy(0, config.system, EnvKind::Ingested, occ, ic.tasks_per_env, &config.data.sampling, &mut rng)?;
    let meta = write_dataset(out, &[rec], None)?;
    Ok(serde_json::json!({
        "accepted": report.accepted,
        "dropped": report.dropped,
        "fingerprint": meta.fingerprint,
    }))
}

pub struct TrainOptions {
    pub dataset: Option<PathBuf>,
    pub resume: bool,
    /// Stop after this many epochs in this invocation.
    pub max_epochs: Option<usize>,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

fn write_train_log(path: &Path, log: &[EpochMetrics]) -> Result<()> {
    let mut text = String::from(EpochMetrics::CSV_HEADER);
    text.push('\n');
    for m in log {
        text.push_str(&m.csv_row());
        text.push('\n');
    }
    write(path, text)
}

pub fn train(config: &Config, seed: u64, out: &Path, opts: &TrainOptions) -> Result<Trainer> {
    let dir = opts
        .dataset
        .clone()
        .or_else(|| config.train.dataset.clone())
        .ok_or_else(|| anyhow!("no dataset given (use --dataset or train.dataset)"))?;
    let data = read_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if data.meta.system != config.system {
        bail!("dataset {} holds {:?} environments but the config is for {:?}", dir.display(), data.meta.system, config.system);
    }
    let ckpt = out.join(CHECKPOINT_FILE);
    let mut trainer = if opts.resume && ckpt.exists() {
        let t = Trainer::load(&ckpt)?;
        if t.state.dataset_fingerprint != data.meta.fingerprint {
            bail!("checkpoint {} was trained on a different dataset", ckpt.display());
        }
        if t.state.schedule != config.train.schedule {
            bail!("checkpoint {} uses a different training schedule than the config", ckpt.display());
        }
        log::info!("resuming at epoch {}", t.state.epoch);
        t
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let model = Model::new(config.model.clone(), &mut rng)?;
        Trainer::new(model, config.train.schedule.clone(), data.meta.fingerprint.clone(), seed)?
    };
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut ran = 0;
    while !trainer.finished() && opts.max_epochs.is_none_or(|m| ran < m) {
        let t = Instant::now();
        let m = trainer.run_epoch(&data.envs)?;
        ran += 1;
        log::info!(
            "epoch {} L_flow {:.3} L_VAE {:.3} best cost {:.1} ({:.1}s)",
            m.epoch,
            m.flow_loss,
            m.vae_loss,
            m.best_cost,
            t.elapsed().as_secs_f64()
        );
        write_train_log(&log_path, &trainer.state.log)?;
        if trainer.state.epoch % config.train.checkpoint_every == 0 {
            trainer.save(&ckpt)?;
        }
    }
    write_train_log(&log_path, &trainer.state.log)?;
    trainer.save(&ckpt)?;
    Ok(trainer)
}

/// Resolves a checkpoint argument: a file, or a training output directory.
pub fn load_model(path: &Path) -> Result<Model> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    Model::load(&file).with_context(|| format!("loading checkpoint {}", file.display()))
}

pub struct EvalOptions {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// The environments of a suite, one task each.
pub fn suite_envs(config: &Config, seed: u64, dataset: Option<&Path>) -> Result<Vec<EnvRecord>> {
    let n = config.eval.n_tasks;
    match dataset.map(Path::to_path_buf).or_else(|| config.eval.dataset.clone()) {
        Some(dir) => {
            let mut data = read_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
            if data.envs.len() < n {
                bail!("dataset {} has {} environments, the suite needs {n}", dir.display(), data.envs.len());
            }
            data.envs.truncate(n);
            Ok(data.envs)
        }
        None if config.eval.kind == EnvKind::Ingested => bail!("ingested suites need a dataset"),
        None => generate(config, config.eval.kind, n, seed, 1),
    }
}

/// One evaluated controller variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant {
    pub kind: ControllerKind,
    pub loss: Option<ProjectionLoss>,
}

impl Variant {
    pub fn label(&self) -> String {
        match self.loss {
            Some(l) => format!("{}[{}]", self.kind.name(), l.label()),
            None => self.kind.name().to_string(),
        }
    }
}

pub fn variants(config: &Config) -> Vec<Variant> {
    let mut out = Vec::new();
    for &kind in &config.eval.controllers {
        if kind == ControllerKind::FlowMppiProject && config.eval.ablation {
            for loss in [ProjectionLoss::OodOnly, ProjectionLoss::FlowOnly, ProjectionLoss::Both] {
                out.push(Variant { kind, loss: Some(loss) });
            }
        } else {
            out.push(Variant { kind, loss: None });
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub rows: Vec<ResultRow>,
    pub trials: Vec<TrialRecord>,
}

fn trace_csv(trace: &Trace) -> String {
    let mut out = String::from("t,state,control\n");
    for (t, x) in trace.states.iter().enumerate() {
        let state: Vec<String> = x.as_slice().iter().map(|v| v.to_string()).collect();
        let control: Vec<String> = trace.controls.get(t).map(|u| u.iter().map(|v| v.to_string()).collect()).unwrap_or_default();
        out.push_str(&format!("{t},{},{}\n", state.join(" "), control.join(" ")));
    }
    out
}

/// Runs every variant at every budget on the same tasks with the same
/// per-task seeds.
pub fn evaluate(config: &Config, seed: u64, envs: &[EnvRecord], model: Option<&Model>, out: Option<&Path>) -> Result<EvalOutput> {
    let mut rows = Vec::new();
    let mut trials = Vec::new();
    for &k in &config.eval.budgets {
        for variant in variants(config) {
            let mut cc = config.controllers.controller(variant.kind, k);
            if let Some(loss) = variant.loss {
                cc.projection.loss = loss;
            }
            let label = variant.label();
            let t0 = Instant::now();
            let results = envs
                .par_iter()
                .enumerate()
                .map(|(id, env)| -> Result<(TrialRecord, Option<Trace>)> {
                    let task = env.task(0);
                    let mut planner = Planner::for_task(cc.clone(), &task, model)?;
                    let s = trial_seed(seed, id);
                    let mut trace = config.eval.trajectories.then(Trace::default);
                    let t = Instant::now();
                    let r = run_trial_traced(&task, &mut planner, config.eval.max_steps, s, trace.as_mut());
                    Ok((TrialRecord::new(id, &label, k, s, &r, t.elapsed().as_secs_f64()), trace))
                })
                .collect::<Result<Vec<_>>>()?;
            let records: Vec<TrialRecord> = results.iter().map(|(r, _)| r.clone()).collect();
            if let Some(dir) = out {
                for (rec, trace) in &results {
                    if let Some(trace) = trace {
                        let name = format!("{}_K{}_task{:04}.csv", label.replace(['[', ']', '+'], "_"), k, rec.task_id);
                        write(&dir.join("trajectories").join(name), trace_csv(trace))?;
                    }
                }
            }
            let row = ResultRow::aggregate(&label, k, seed, &records, config.eval.cost_average);
            log::info!(
                "{label} K={k}: success {:.2}, cost {:.1} ({:.1}s)",
                row.success_rate,
                row.mean_cost,
                t0.elapsed().as_secs_f64()
            );
            rows.push(row);
            trials.extend(records);
        }
    }
    Ok(EvalOutput { rows, trials })
}

pub fn eval(config: &Config, seed: u64, out: &Path, opts: &EvalOptions) -> Result<EvalOutput> {
    let envs = suite_envs(config, seed, opts.dataset.as_deref())?;
    let ckpt = opts.checkpoint.clone().or_else(|| config.eval.checkpoint.clone());
    let model = match (config.model_needed(), ckpt) {
        (false, _) => None,
        (true, Some(p)) => Some(load_model(&p)?),
        (true, None) => bail!("the flow controllers need a checkpoint (use --checkpoint or eval.checkpoint)"),
    };
    if let Some(m) = &model {
        if m.config.system != config.system {
            bail!("checkpoint is for {:?}, the suite for {:?}", m.config.system, config.system);
        }
    }
    let output = evaluate(config, seed, &envs, model.as_ref(), Some(out))?;
    write(&out.join("results.csv"), results_csv(&output.rows))?;
    write(&out.join("results.txt"), results_table(&output.rows))?;
    let mut jsonl = String::new();
    for t in &output.trials {
        jsonl.push_str(&serde_json::to_string(t)?);
        jsonl.push('\n');
    }
    write(&out.join("trials.jsonl"), jsonl)?;
    Ok(output)
}

#[derive(Debug, Clone, Serialize)]
pub struct OodOutput {
    /// `(env_id, label, score)` in set order.
    pub scores: Vec<(usize, String, f64)>,
    /// AUROC of each later set against the first.
    pub auroc: Vec<(String, f64)>,
}

pub fn ood_scores(model: &Model, envs: &[EnvRecord]) -> Result<Vec<f64>> {
    envs.par_iter()
        .map(|e| {
            let h = model.embed(&e.sdf)?;
            Ok(model.vae.ood_score(&h)?)
        })
        .collect()
}

pub fn ood_hist(config: &Config, seed: u64, out: &Path, checkpoint: Option<&Path>) -> Result<OodOutput> {
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .or_else(|| config.ood.checkpoint.clone())
        .ok_or_else(|| anyhow!("ood-hist needs a checkpoint (use --checkpoint or ood.checkpoint)"))?;
    let model = load_model(&ckpt)?;
    let mut groups = Vec::new();
    for (i, set) in config.ood.sets.iter().enumerate() {
        let envs = match &set.dataset {
            Some(dir) => {
                let mut d = read_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
                d.envs.truncate(set.count);
                d.envs
            }
            None => generate(config, set.kind, set.count, set.seed.unwrap_or_else(|| mix(seed ^ mix(i as u64 + 1))), 1)?,
        };
        groups.push((set.label.clone(), ood_scores(&model, &envs)?));
    }
    let mut csv = String::from("env_id,label,score\n");
    let mut scores = Vec::new();
    for (label, s) in &groups {
        for (id, v) in s.iter().enumerate() {
            csv.push_str(&format!("{id},{label},{v}\n"));
            scores.push((id, label.clone(), *v));
        }
    }
    let mut rocs = Vec::new();
    for (label, s) in &groups[1..] {
        let a = auroc(&groups[0].1, s);
        csv.push_str(&format!("# auroc,{},{label},{a}\n", groups[0].0));
        rocs.push((label.clone(), a));
    }
    write(&out.join("ood_scores.csv"), csv)?;
    write(&out.join("ood_hist.svg"), histogram_svg(&groups, config.ood.bins, "per-dimension OOD score"))?;
    Ok(OodOutput { scores, auroc: rocs })
}
