//! On-disk formats: binary datasets and checkpoints, the task manifest and
//! the output-directory lock.
//!
//! All integers and floats are little-endian.
//!
//! Dataset file:
//! ```text
//! magic "THPS" | version u32 | task_id u64 | seed u64 | n_paths u64 | n_steps u64
//! maturity f64 | model code u32 | n_values u32 | model values f64 x n_values
//! flags u32 (bit 0: variance present) | reserved u32
//! spot f64 x n_paths*(n_steps+1) | [variance f64 x n_paths*(n_steps+1)]
//! ```
//!
//! Checkpoint file:
//! ```text
//! magic "THCK" | version u32 | n_tasks u64 | embed_dim u64 | n_hidden u64
//! widths u64 x n_hidden | input_scale f64 x 2 | n_params u64 | params f64 x n_params
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use taskhedge::market_models::{ModelSpec, PathSet, TimeGrid};
use taskhedge::neural::{NetworkArch, NetworkParams};

use crate::CliError;

const DATASET_MAGIC: &[u8; 4] = b"THPS";
const CHECKPOINT_MAGIC: &[u8; 4] = b"THCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, x: u32) -> &mut Self {
        self.0.extend_from_slice(&x.to_le_bytes());
        self
    }

    fn u64(&mut self, x: u64) -> &mut Self {
        self.0.extend_from_slice(&x.to_le_bytes());
        self
    }

    fn f64s(&mut self, xs: &[f64]) -> &mut Self {
        self.0.reserve(xs.len() * 8);
        xs.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
        self
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.bytes.len() < n {
            return Err(CliError::Format(format!("{} is truncated", self.what)));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, CliError> {
        usize::try_from(self.u64()?).map_err(|_| CliError::Format(format!("{} has an oversized count", self.what)))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CliError> {
        let len = n.checked_mul(8).ok_or_else(|| CliError::Format(format!("{} has an oversized count", self.what)))?;
        Ok(self.take(len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<(), CliError> {
        if self.take(4)? != magic {
            return Err(CliError::Format(format!("{} has the wrong magic bytes", self.what)));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(CliError::Format(format!("{} has unsupported format version {version}", self.what)));
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), CliError> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(CliError::Format(format!("{} has {} trailing bytes", self.what, self.bytes.len())))
        }
    }
}

pub fn encode_dataset(paths: &PathSet) -> Vec<u8> {
    let (code, values) = paths.model.to_descriptor();
    let mut w = Writer::default();
    w.0.extend_from_slice(DATASET_MAGIC);
    w.u32(FORMAT_VERSION)
        .u64(paths.task_id as u64)
        .u64(paths.seed)
        .u64(paths.n_paths() as u64)
        .u64(paths.n_steps() as u64)
        .f64s(&[paths.grid.maturity()])
        .u32(code)
        .u32(values.len() as u32)
        .f64s(&values)
        .u32(paths.variance_matrix().is_some() as u32)
        .u32(0)
        .f64s(paths.spot_matrix());
    if let Some(v) = paths.variance_matrix() {
        w.f64s(v);
    }
    w.0
}

pub fn decode_dataset(bytes: &[u8]) -> Result<PathSet, CliError> {
    let mut r = Reader { bytes, what: "dataset file" };
    r.header(DATASET_MAGIC)?;
    let task_id = r.usize()?;
    let seed = r.u64()?;
    let n_paths = r.usize()?;
    let n_steps = r.usize()?;
    let maturity = r.f64s(1)?[0];
    let code = r.u32()?;
    let n_values = r.u32()? as usize;
    let model = ModelSpec::from_descriptor(code, &r.f64s(n_values)?)?;
    let flags = r.u32()?;
    r.u32()?;
    let len = n_paths
        .checked_mul(n_steps + 1)
        .ok_or_else(|| CliError::Format("dataset file has an oversized count".into()))?;
    let spot = r.f64s(len)?;
    let variance = if flags & 1 == 1 { Some(r.f64s(len)?) } else { None };
    r.finish()?;
    Ok(PathSet::from_parts(task_id, seed, TimeGrid::new(maturity, n_steps)?, model, spot, variance)?)
}

pub fn encode_checkpoint(params: &NetworkParams) -> Vec<u8> {
    let arch = params.arch();
    let mut w = Writer::default();
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(FORMAT_VERSION).u64(arch.n_tasks as u64).u64(arch.embed_dim as u64).u64(arch.hidden.len() as u64);
    for &h in &arch.hidden {
        w.u64(h as u64);
    }
    w.f64s(&arch.input_scale).u64(params.as_slice().len() as u64).f64s(params.as_slice());
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetworkParams, CliError> {
    let mut r = Reader { bytes, what: "checkpoint file" };
    r.header(CHECKPOINT_MAGIC)?;
    let n_tasks = r.usize()?;
    let embed_dim = r.usize()?;
    let n_hidden = r.usize()?;
    let hidden = (0..n_hidden).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
    let scale = r.f64s(2)?;
    let arch = NetworkArch { n_tasks, embed_dim, hidden, input_scale: [scale[0], scale[1]] };
    arch.validate()?;
    let n_params = r.usize()?;
    let data = r.f64s(n_params)?;
    r.finish()?;
    Ok(NetworkParams::from_flat(&arch, data)?)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))
}

pub fn save_dataset(path: &Path, paths: &PathSet) -> Result<(), CliError> {
    write_file(path, &encode_dataset(paths))
}

pub fn load_dataset(path: &Path) -> Result<PathSet, CliError> {
    decode_dataset(&read_file(path)?)
        .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

pub fn save_checkpoint(path: &Path, params: &NetworkParams) -> Result<(), CliError> {
    write_file(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams, CliError> {
    decode_checkpoint(&read_file(path)?).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

/// Debug export: one row per path, columns `path,s_0,...,s_n`.
pub fn dataset_csv(paths: &PathSet) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["path".to_string()];
    header.extend((0..=paths.n_steps()).map(|k| format!("s_{k}")));
    w.write_record(&header)?;
    for (p, path) in paths.paths().enumerate() {
        let mut row = vec![p.to_string()];
        row.extend(path.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| CliError::Format(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub task_id: usize,
    pub model: ModelSpec,
    pub seed: u64,
    pub file: String,
}

const MANIFEST_HEADER: [&str; 5] = ["task_id", "model_kind", "seed", "file", "model"];

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)?;
    for r in rows {
        let model = serde_json::to_string(&r.model).expect("model serializes");
        w.write_record([r.task_id.to_string(), r.model.kind().as_str().into(), r.seed.to_string(), r.file.clone(), model])?;
    }
    write_file(path, &w.into_inner().map_err(|e| CliError::Format(e.to_string()))?)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, CliError> {
    let bytes = read_file(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let bad = |msg: String| CliError::Format(format!("{}: {msg}", path.display()));
    if r.headers()?.iter().ne(MANIFEST_HEADER) {
        return Err(bad("unexpected manifest header".into()));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let task_id = rec[0].parse().map_err(|_| bad(format!("bad task id {:?}", &rec[0])))?;
        let seed = rec[2].parse().map_err(|_| bad(format!("bad seed {:?}", &rec[2])))?;
        let model = serde_json::from_str(&rec[4]).map_err(|e| bad(format!("bad model: {e}")))?;
        rows.push(ManifestRow { task_id, model, seed, file: rec[3].to_string() });
    }
    if rows.iter().enumerate().any(|(i, r)| r.task_id != i) {
        return Err(bad("task ids must run 0..m in order".into()));
    }
    Ok(rows)
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Config(format!(
                "{} is locked by another run (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::io(format!("locking {}", dir.display()), e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
