//! TOML configuration. Every key has a default for the chosen system; a
//! config file only lists the keys it changes, and unknown keys are errors.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flowmpc::controllers::{ControllerConfig, ControllerKind, IcemParams, MppiParams, ProjectionParams};
use flowmpc::dataset::GenSpec;
use flowmpc::dynamics::System;
use flowmpc::envgen::{EnvKind, ObstacleParams, PassageParams, TaskSampling};
use flowmpc::posterior::{ModelConfig, TrainSchedule};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub system: System,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: SuiteConfig,
    pub controllers: ControllerParams,
    pub ood: OodConfig,
    pub ingest: IngestConfig,
}

/// Environment generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: EnvKind,
    pub count: usize,
    pub cells: usize,
    pub extent: f64,
    pub tasks_per_env: usize,
    pub obstacles: ObstacleParams,
    pub passages: PassageParams,
    pub sampling: TaskSampling,
}

impl DataConfig {
    pub fn gen_spec(&self, system: System, kind: EnvKind, count: usize, seed: u64, tasks_per_env: usize) -> GenSpec {
        GenSpec {
            system,
            kind,
            count,
            seed,
            cells: self.cells,
            extent: self.extent,
            tasks_per_env,
            obstacles: self.obstacles,
            passages: self.passages,
            sampling: self.sampling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: Option<PathBuf>,
    /// Save a checkpoint every this many epochs (and at the end).
    pub checkpoint_every: usize,
    pub schedule: TrainSchedule,
}

/// Which trials a results table averages the cost over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostAverage {
    All,
    Successful,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub kind: EnvKind,
    /// Evaluate on this dataset's environments instead of generating them.
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub n_tasks: usize,
    pub budgets: Vec<usize>,
    pub controllers: Vec<ControllerKind>,
    pub max_steps: usize,
    /// Replace each FlowMPPIProject row by one row per projection loss.
    pub ablation: bool,
    pub cost_average: CostAverage,
    /// Write one CSV per trial with the executed trajectory.
    pub trajectories: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerParams {
    pub mppi: MppiParams,
    pub icem: IcemParams,
    pub flow_mppi: MppiParams,
    pub projection: ProjectionParams,
}

impl ControllerParams {
    pub fn controller(&self, kind: ControllerKind, samples: usize) -> ControllerConfig {
        ControllerConfig {
            kind,
            samples,
            mppi: self.mppi,
            icem: self.icem,
            flow_mppi: self.flow_mppi,
            projection: self.projection,
        }
    }
}

/// One labelled group of environments for OOD histograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSet {
    pub label: String,
    pub kind: EnvKind,
    pub count: usize,
    /// Generation seed; defaults to one derived from `--seed` and the set index.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Take the environments from a dataset instead.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodConfig {
    pub checkpoint: Option<PathBuf>,
    /// The first set is the reference for AUROC.
    pub sets: Vec<EnvSet>,
    pub bins: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointFormat {
    /// `.bin` files are binary, anything else ASCII.
    Auto,
    Ascii,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub input: Option<PathBuf>,
    pub format: PointFormat,
    pub cells: usize,
    pub extent: f64,
    pub origin: [f64; 3],
    pub tasks_per_env: usize,
}

impl Config {
    pub fn defaults(system: System) -> Self {
        let gen = GenSpec::new(system, EnvKind::Cluttered, 10_000, 0);
        let ctrl = ControllerConfig::for_system(system, ControllerKind::Mppi, 512);
        Config {
            system,
            data: DataConfig {
                kind: EnvKind::Cluttered,
                count: gen.count,
                cells: gen.cells,
                extent: gen.extent,
                tasks_per_env: gen.tasks_per_env,
                obstacles: gen.obstacles,
                passages: gen.passages,
                sampling: gen.sampling,
            },
            model: ModelConfig::for_system(system),
            train: TrainConfig { dataset: None, checkpoint_every: 10, schedule: TrainSchedule::paper(system) },
            eval: SuiteConfig {
                kind: EnvKind::Cluttered,
                dataset: None,
                checkpoint: None,
                n_tasks: 100,
                budgets: vec![256, 512, 1024],
                controllers: vec![ControllerKind::Mppi, ControllerKind::Icem, ControllerKind::FlowMppi, ControllerKind::FlowMppiProject],
                max_steps: 100,
                ablation: false,
                cost_average: CostAverage::All,
                trajectories: false,
            },
            controllers: ControllerParams { mppi: ctrl.mppi, icem: ctrl.icem, flow_mppi: ctrl.flow_mppi, projection: ctrl.projection },
            ood: OodConfig {
                checkpoint: None,
                sets: vec![
                    EnvSet { label: "in-distribution".into(), kind: EnvKind::Cluttered, count: 100, seed: None, dataset: None },
                    EnvSet { label: "rooms".into(), kind: EnvKind::Rooms, count: 100, seed: None, dataset: None },
                ],
                bins: 30,
            },
            ingest: IngestConfig {
                input: None,
                format: PointFormat::Auto,
                cells: gen.cells,
                extent: gen.extent,
                origin: [0.0; 3],
                tasks_per_env: gen.tasks_per_env,
            },
        }
    }

    /// Parses TOML text on top of the defaults of its `system` key
    /// (planar when absent).
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        let system = match user.get("system") {
            None => System::Planar,
            Some(v) => v.clone().try_into().context("invalid system")?,
        };
        let mut merged = toml::Table::try_from(Self::defaults(system)).context("serializing defaults")?;
        merge(&mut merged, user);
        let config: Config = toml::Value::Table(merged).try_into().context("invalid config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => {
                let config = Self::defaults(System::Planar);
                config.validate()?;
                Ok(config)
            }
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("in {}", p.display()))
            }
        }
    }

    /// Lists every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.model.system != self.system {
            errs.push(format!("model.system {:?} differs from system {:?}", self.model.system, self.system));
        }
        if let Err(e) = self.model.validate() {
            errs.push(format!("model: {e}"));
        }
        if let Err(e) = self.train.schedule.validate() {
            errs.push(format!("train.schedule: {e}"));
        }
        if self.train.checkpoint_every == 0 {
            errs.push("train.checkpoint_every must be at least 1".into());
        }
        if self.data.count == 0 || self.data.tasks_per_env == 0 {
            errs.push("data.count and data.tasks_per_env must be at least 1".into());
        }
        let s = &self.eval;
        if s.n_tasks == 0 {
            errs.push("eval.n_tasks must be at least 1".into());
        }
        if s.budgets.is_empty() || s.budgets.contains(&0) {
            errs.push("eval.budgets must be a non-empty list of positive budgets".into());
        }
        if s.controllers.is_empty() {
            errs.push("eval.controllers must not be empty".into());
        }
        for &k in &s.budgets {
            for &kind in &s.controllers {
                if let Err(e) = self.controllers.controller(kind, k).validate() {
                    errs.push(format!("{} at K={k}: {e}", kind.name()));
                }
            }
        }
        if self.ood.sets.len() < 2 || self.ood.sets.iter().any(|s| s.count == 0) || self.ood.bins == 0 {
            errs.push("ood needs at least two non-empty sets and at least one bin".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            bail!("{}", errs.join("; "))
        }
    }

    pub fn model_needed(&self) -> bool {
        self.eval.controllers.iter().any(|k| k.needs_model())
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
