//! Environment records and the on-disk dataset layout.
//!
//! A dataset is a directory holding `meta.json` and one `env_XXXXXX.bin`
//! per environment. Each environment file is little-endian:
//!
//! ```text
//! magic "FMPCENV1"
//! u8 system, u8 kind, u8 dim, u8 reserved, u32 cells, f64 extent, 3 x f64 origin
//! u32 task count, u32 state dim
//! occupancy bits, packed LSB-first, ceil(cells^dim / 8) bytes
//! SDF values as f32, cells^dim entries (x slowest)
//! task count x (start, goal) states as f64
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{State, System, Task};
use crate::envgen::{gen_cluttered, gen_rooms, occupancy_to_sdf, sample_start_goal, EnvKind, ObstacleParams, PassageParams, TaskSampling};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, OccupancyGrid, SdfGrid};

const MAGIC: &[u8; 8] = b"FMPCENV1";
pub const FORMAT_VERSION: u32 = 1;
const MAX_ENV_ATTEMPTS: u64 = 50;

/// One environment with its start/goal pairs.
#[derive(Debug, Clone)]
pub struct EnvRecord {
    pub id: usize,
    pub system: System,
    pub kind: EnvKind,
    pub occupancy: OccupancyGrid,
    pub sdf: Arc<SdfGrid>,
    pub tasks: Vec<(State, State)>,
}

impl EnvRecord {
    /// Builds a record from an occupancy grid. SDF values are rounded to
    /// `f32` so that a record read back from disk is identical.
    pub fn from_occupancy<R: rand::Rng + ?Sized>(
        id: usize,
        system: System,
        kind: EnvKind,
        occupancy: OccupancyGrid,
        tasks_per_env: usize,
        sampling: &TaskSampling,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sdf = occupancy_to_sdf(&occupancy);
        for v in sdf.values.iter_mut() {
            *v = f64::from(*v as f32);
        }
        let tasks = (0..tasks_per_env)
            .map(|_| sample_start_goal(&sdf, rng, system, sampling))
            .collect::<Result<Vec<_>>>()?;
        Ok(EnvRecord { id, system, kind, occupancy, sdf: Arc::new(sdf), tasks })
    }

    pub fn task(&self, index: usize) -> Task {
        let (start, goal) = self.tasks[index];
        Task { system: self.system, sdf: Arc::clone(&self.sdf), start, goal }
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub system: System,
    pub kind: EnvKind,
    pub count: usize,
    pub seed: u64,
    pub cells: usize,
    pub extent: f64,
    pub tasks_per_env: usize,
    pub obstacles: ObstacleParams,
    pub passages: PassageParams,
    pub sampling: TaskSampling,
}

impl GenSpec {
    pub fn new(system: System, kind: EnvKind, count: usize, seed: u64) -> Self {
        GenSpec {
            system,
            kind,
            count,
            seed,
            cells: crate::grid::DEFAULT_CELLS,
            extent: crate::grid::DEFAULT_EXTENT,
            tasks_per_env: 100,
            obstacles: match system {
                System::Planar => ObstacleParams::planar(),
                System::Quadrotor => ObstacleParams::quadrotor(),
            },
            passages: PassageParams::default(),
            sampling: TaskSampling::default(),
        }
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.system.space_dim(), self.cells, self.extent)
    }
}

/// Independent random stream per environment, so environments can be
/// generated in any order or in parallel.
pub fn env_rng(seed: u64, id: usize, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(id as u64);
    rng
}

/// Generates environment `id` of a dataset. Environments whose task
/// sampling turns out infeasible are redrawn from the next attempt stream.
pub fn generate_env(spec: &GenSpec, id: usize) -> Result<EnvRecord> {
    let grid = spec.grid_spec()?;
    let mut last = None;
    for attempt in 0..MAX_ENV_ATTEMPTS {
        let mut rng = env_rng(spec.seed, id, attempt);
        let occ = match spec.kind {
            EnvKind::Cluttered => gen_cluttered(&mut rng, grid, &spec.obstacles)?,
            EnvKind::Rooms => gen_rooms(&mut rng, grid, &spec.passages)?,
            EnvKind::Ingested => {
                return Err(Error::InvalidParams("ingested environments come from point clouds".into()))
            }
        };
        match EnvRecord::from_occupancy(id, spec.system, spec.kind, occ, spec.tasks_per_env, &spec.sampling, &mut rng) {
            Ok(rec) => return Ok(rec),
            Err(e @ Error::Infeasible(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(Error::Generation {
        attempts: MAX_ENV_ATTEMPTS as usize,
        reason: last.map(|e| e.to_string()).unwrap_or_default(),
    })
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub generator: Option<GenSpec>,
    pub system: System,
    pub count: usize,
    pub cells: usize,
    pub extent: f64,
    pub files: Vec<String>,
    /// FNV-1a over the environment files, in order.
    pub fingerprint: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub envs: Vec<EnvRecord>,
}

fn system_code(s: System) -> u8 {
    match s {
        System::Planar => 0,
        System::Quadrotor => 1,
    }
}

fn kind_code(k: EnvKind) -> u8 {
    match k {
        EnvKind::Cluttered => 0,
        EnvKind::Rooms => 1,
        EnvKind::Ingested => 2,
    }
}

/// 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn update(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn hex(&self) -> String {
        format!("{:016x}", self.0)
    }
}

pub fn encode_env(rec: &EnvRecord) -> Vec<u8> {
    let spec = rec.sdf.spec;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(system_code(rec.system));
    out.push(kind_code(rec.kind));
    out.push(spec.dim as u8);
    out.push(0);
    let w = &mut out;
    w.write_u32::<LittleEndian>(spec.cells as u32).unwrap();
    w.write_f64::<LittleEndian>(spec.extent).unwrap();
    for o in spec.origin {
        w.write_f64::<LittleEndian>(o).unwrap();
    }
    w.write_u32::<LittleEndian>(rec.tasks.len() as u32).unwrap();
    w.write_u32::<LittleEndian>(rec.system.state_dim() as u32).unwrap();
    let mut bits = vec![0u8; spec.len().div_ceil(8)];
    for (i, &occ) in rec.occupancy.cells.iter().enumerate() {
        if occ {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    w.extend_from_slice(&bits);
    for v in &rec.sdf.values {
        w.write_f32::<LittleEndian>(*v as f32).unwrap();
    }
    for (s, g) in &rec.tasks {
        for v in s.as_slice().iter().chain(g.as_slice()) {
            w.write_f64::<LittleEndian>(*v).unwrap();
        }
    }
    out
}

pub fn decode_env(id: usize, bytes: &[u8], path: &Path) -> Result<EnvRecord> {
    let bad = |reason: &str| Error::format(path, reason.to_string());
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing environment magic"));
    }
    let mut c = Cursor::new(&bytes[MAGIC.len()..]);
    let eof = |_| bad("truncated environment file");
    let system = match c.read_u8().map_err(eof)? {
        0 => System::Planar,
        1 => System::Quadrotor,
        _ => return Err(bad("unknown system code")),
    };
    let kind = match c.read_u8().map_err(eof)? {
        0 => EnvKind::Cluttered,
        1 => EnvKind::Rooms,
        2 => EnvKind::Ingested,
        _ => return Err(bad("unknown environment kind")),
    };
    let dim = c.read_u8().map_err(eof)? as usize;
    c.read_u8().map_err(eof)?;
    let cells = c.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let extent = c.read_f64::<LittleEndian>().map_err(eof)?;
    let mut origin = [0.0; 3];
    for o in origin.iter_mut() {
        *o = c.read_f64::<LittleEndian>().map_err(eof)?;
    }
    let n_tasks = c.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let state_dim = c.read_u32::<LittleEndian>().map_err(eof)? as usize;
    if dim != system.space_dim() || state_dim != system.state_dim() {
        return Err(bad("header does not match the system"));
    }
    let spec = GridSpec::with_origin(dim, cells, extent, origin)?;
    let mut bits = vec![0u8; spec.len().div_ceil(8)];
    c.read_exact(&mut bits).map_err(eof)?;
    let occupancy = OccupancyGrid::from_cells(spec, (0..spec.len()).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect())?;
    let mut values = vec![0.0; spec.len()];
    for v in values.iter_mut() {
        *v = f64::from(c.read_f32::<LittleEndian>().map_err(eof)?);
    }
    let mut tasks = Vec::with_capacity(n_tasks);
    let mut buf = vec![0.0; 2 * state_dim];
    for _ in 0..n_tasks {
        for v in buf.iter_mut() {
            *v = c.read_f64::<LittleEndian>().map_err(eof)?;
        }
        tasks.push((State::from_slice(system, &buf[..state_dim])?, State::from_slice(system, &buf[state_dim..])?));
    }
    if (c.position() as usize) != bytes.len() - MAGIC.len() {
        return Err(bad("trailing bytes after environment data"));
    }
    Ok(EnvRecord { id, system, kind, occupancy, sdf: Arc::new(SdfGrid::from_values(spec, values)?), tasks })
}

fn env_file_name(id: usize) -> String {
    format!("env_{id:06}.bin")
}

/// Writes the records and `meta.json` into `dir` (created if missing).
pub fn write_dataset(dir: &Path, envs: &[EnvRecord], generator: Option<GenSpec>) -> Result<DatasetMeta> {
    let first = envs.first().ok_or_else(|| Error::InvalidParams("dataset has no environments".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut hash = Fnv::default();
    let mut files = Vec::with_capacity(envs.len());
    for rec in envs {
        let name = env_file_name(rec.id);
        let path = dir.join(&name);
        let bytes = encode_env(rec);
        hash.update(&bytes);
        fs::File::create(&path).and_then(|mut f| f.write_all(&bytes)).map_err(|e| Error::io(&path, e))?;
        files.push(name);
    }
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        generator,
        system: first.system,
        count: envs.len(),
        cells: first.sdf.spec.cells,
        extent: first.sdf.spec.extent,
        files,
        fingerprint: hash.hex(),
    };
    let path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::format(&path, format!("unsupported format version {}", meta.format_version)));
    }
    if meta.files.len() != meta.count {
        return Err(Error::format(&path, "file list does not match the environment count"));
    }
    Ok(meta)
}

/// Loads a dataset and checks its fingerprint.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta = read_meta(dir)?;
    let mut hash = Fnv::default();
    let mut envs = Vec::with_capacity(meta.count);
    for (id, name) in meta.files.iter().enumerate() {
        let path: PathBuf = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hash.update(&bytes);
        envs.push(decode_env(id, &bytes, &path)?);
    }
    if hash.hex() != meta.fingerprint {
        return Err(Error::format(dir.join("meta.json"), "fingerprint does not match the environment files"));
    }
    Ok(Dataset { meta, envs })
}
