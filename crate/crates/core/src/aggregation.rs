//! Model averaging across agents and across saved checkpoints, plus the
//! checkpoint file format and an on-disk store.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "WDQN"            4 bytes magic
//! version           u32, currently 1
//! metadata_len      u32
//! metadata          metadata_len bytes of UTF-8 JSON
//! param_count       u64
//! params            param_count x f64, canonical order
//! crc32             u32 over the param bytes
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dqn::{param_count, DqnAgent, DqnError, QNetwork};
use crate::seeding::RngState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WDQN";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_EXTENSION: &str = "wdqn";
/// Environment variable naming the default store root.
pub const STORE_ENV: &str = "SPECGRID_STORE";

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("no models to aggregate")]
    Empty,
    #[error(transparent)]
    Architecture(#[from] DqnError),
    #[error("checkpoint not found: {0}")]
    NotFound(PathBuf),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad magic bytes {0:?}, not a checkpoint")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("length mismatch: {what} declares {declared}, found {actual}")]
    LengthMismatch {
        what: &'static str,
        declared: u64,
        actual: u64,
    },
    #[error("CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("invalid checkpoint metadata: {0}")]
    Metadata(String),
    #[error("invalid checkpoint name {0:?}")]
    InvalidName(String),
}

type Result<T> = std::result::Result<T, AggregationError>;

/// Correctly rounded sum of `values` (Shewchuk partials with half-way fix-up).
///
/// The result depends only on the multiset of inputs, not their order.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }

    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    // Round half-way cases using the sign of the next partial.
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// Mean of `values`, rounded from the exact sum.
///
/// `fl(sum) / n` can miss by an ulp (three copies of `x` need not average to
/// `x`), so the quotient is corrected by the exact residual `sum - q * n`.
pub fn exact_mean(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let q = exact_sum(values.iter().copied()) / n;
    if !q.is_finite() {
        return q;
    }
    let p = q * n;
    let e = q.mul_add(n, -p);
    let residual = exact_sum(values.iter().copied().chain([-p, -e]));
    q + residual / n
}

/// Elementwise arithmetic mean of the models' parameters.
pub fn average_models(models: &[&QNetwork]) -> Result<QNetwork> {
    let first = models.first().ok_or(AggregationError::Empty)?;
    for m in &models[1..] {
        first.same_architecture(m)?;
    }
    let mut column = vec![0.0; models.len()];
    let params = (0..first.params().len())
        .map(|i| {
            for (c, m) in column.iter_mut().zip(models) {
                *c = m.params()[i];
            }
            exact_mean(&column)
        })
        .collect();
    Ok(QNetwork::from_flat(first.layer_dims(), params)?)
}

/// Average of every agent's online network.
pub fn average_agents(agents: &[DqnAgent]) -> Result<QNetwork> {
    let nets: Vec<&QNetwork> = agents.iter().map(|a| &a.online).collect();
    average_models(&nets)
}

/// Installs `model` as every agent's online and target network. Replay
/// buffers are left alone.
pub fn broadcast(model: &QNetwork, agents: &mut [DqnAgent]) -> Result<()> {
    for agent in agents.iter() {
        model.same_architecture(&agent.online)?;
    }
    for agent in agents.iter_mut() {
        agent.online.params_mut().copy_from_slice(model.params());
        agent.target.params_mut().copy_from_slice(model.params());
    }
    Ok(())
}

/// Shape of the problem a model was trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub layer_dims: [usize; 4],
    pub k: usize,
    pub n_p: usize,
    pub n_f: usize,
}

impl Architecture {
    pub fn check(&self, other: &Architecture) -> Result<()> {
        if self != other {
            return Err(DqnError::Architecture {
                left: self.layer_dims,
                right: other.layer_dims,
            }
            .into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMetadata {
    pub schema_version: u32,
    pub architecture: Architecture,
    pub scenario: String,
    pub training_step: u64,
    pub created_unix: u64,
    /// Run RNG position at the moment of saving, for resumption.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_state: Option<RngState>,
    /// Caller-defined progress marker (training phase etc.).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub metadata: CheckpointMetadata,
    pub model: QNetwork,
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl ModelCheckpoint {
    pub fn new(
        model: QNetwork,
        k: usize,
        n_p: usize,
        n_f: usize,
        scenario: &str,
        training_step: u64,
    ) -> Self {
        let architecture = Architecture {
            layer_dims: model.layer_dims(),
            k,
            n_p,
            n_f,
        };
        Self {
            metadata: CheckpointMetadata {
                schema_version: CHECKPOINT_VERSION,
                architecture,
                scenario: scenario.to_string(),
                training_step,
                created_unix: unix_now(),
                rng_state: None,
                progress: None,
            },
            model,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.metadata.architecture
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        let params = self.model.params();
        let mut out = Vec::with_capacity(4 + 4 + 4 + meta.len() + 8 + params.len() * 8 + 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        let start = out.len();
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let short = |need: usize| AggregationError::LengthMismatch {
            what: "file",
            declared: need as u64,
            actual: bytes.len() as u64,
        };
        if bytes.len() < 12 {
            return Err(short(12));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if &magic != CHECKPOINT_MAGIC {
            return Err(AggregationError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(AggregationError::UnsupportedVersion(version));
        }
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let meta_end = 12 + meta_len;
        if bytes.len() < meta_end + 8 {
            return Err(short(meta_end + 8));
        }
        let metadata: CheckpointMetadata = serde_json::from_slice(&bytes[12..meta_end])
            .map_err(|e| AggregationError::Metadata(e.to_string()))?;
        let count = u64::from_le_bytes(bytes[meta_end..meta_end + 8].try_into().unwrap());
        let payload_start = meta_end + 8;
        let available = (bytes.len() - payload_start) as u64;
        if count.checked_mul(8).and_then(|b| b.checked_add(4)) != Some(available) {
            return Err(AggregationError::LengthMismatch {
                what: "param_count",
                declared: count,
                actual: available.saturating_sub(4) / 8,
            });
        }
        let payload_end = payload_start + count as usize * 8;
        let payload = &bytes[payload_start..payload_end];
        let stored = u32::from_le_bytes(bytes[payload_end..].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(AggregationError::CrcMismatch { stored, computed });
        }
        let dims = metadata.architecture.layer_dims;
        let expected = param_count(dims) as u64;
        if expected != count {
            return Err(AggregationError::LengthMismatch {
                what: "architecture",
                declared: expected,
                actual: count,
            });
        }
        let params = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let model = QNetwork::from_flat(dims, params)?;
        Ok(Self { metadata, model })
    }
}

static WRITE_LOCK: Mutex<()> = Mutex::new(());
static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes via a temporary file in the same directory, then renames.
pub fn write_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    let io_err = |source| AggregationError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| AggregationError::InvalidName(path.display().to_string()))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}-{}",
        file_name.to_string_lossy(),
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let bytes = ckpt.encode();
    let _guard = WRITE_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let write = || -> io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(e)
    })
}

pub fn read_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => AggregationError::NotFound(path.to_path_buf()),
        _ => AggregationError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    ModelCheckpoint::decode(&bytes)
}

/// Store names are non-empty ASCII `[A-Za-z0-9_.-]` not starting with a dot.
pub fn validate_name(name: &str) -> Result<()> {
    let valid = !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if valid {
        Ok(())
    } else {
        Err(AggregationError::InvalidName(name.to_string()))
    }
}

/// Directory of named checkpoints, one `<name>.wdqn` file each.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    root: PathBuf,
}

impl CheckpointStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| AggregationError::Io {
            path: root.clone(),
            source,
        })?;
        Ok(Self { root })
    }

    /// Store rooted at `$SPECGRID_STORE`, if set.
    pub fn from_env() -> Option<Result<Self>> {
        std::env::var_os(STORE_ENV).map(|root| Self::open(PathBuf::from(root)))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, name: &str) -> Result<PathBuf> {
        validate_name(name)?;
        Ok(self.root.join(format!("{name}.{CHECKPOINT_EXTENSION}")))
    }

    pub fn save(&self, name: &str, ckpt: &ModelCheckpoint) -> Result<PathBuf> {
        let path = self.path_for(name)?;
        write_checkpoint(&path, ckpt)?;
        Ok(path)
    }

    pub fn load(&self, name: &str) -> Result<ModelCheckpoint> {
        read_checkpoint(&self.path_for(name)?)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.path_for(name).map(|p| p.is_file()).unwrap_or(false)
    }

    /// Names of all checkpoints in the store, sorted.
    pub fn list(&self) -> Result<Vec<String>> {
        let entries = fs::read_dir(&self.root).map_err(|source| AggregationError::Io {
            path: self.root.clone(),
            source,
        })?;
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                name.strip_suffix(&format!(".{CHECKPOINT_EXTENSION}"))
                    .map(str::to_string)
            })
            .filter(|n| !n.starts_with('.'))
            .collect();
        names.sort();
        Ok(names)
    }
}

/// Loads the named checkpoints and averages them. Names may repeat.
pub fn aggregate_checkpoints(store: &CheckpointStore, names: &[&str]) -> Result<ModelCheckpoint> {
    if names.is_empty() {
        return Err(AggregationError::Empty);
    }
    let loaded: Vec<ModelCheckpoint> =
        names.iter().map(|n| store.load(n)).collect::<Result<_>>()?;
    let arch = *loaded[0].architecture();
    for c in &loaded[1..] {
        arch.check(c.architecture())?;
    }
    let models: Vec<&QNetwork> = loaded.iter().map(|c| &c.model).collect();
    let model = average_models(&models)?;
    let step = loaded
        .iter()
        .map(|c| c.metadata.training_step)
        .max()
        .unwrap_or(0);
    Ok(ModelCheckpoint::new(
        model,
        arch.k,
        arch.n_p,
        arch.n_f,
        &format!("aggregate({})", names.join(",")),
        step,
    ))
}
