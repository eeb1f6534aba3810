//! Parameter storage, seeded initialization and the flat weight-manifest format.
//!
//! Every learnable grid and running statistic lives in a [`ParamStore`] under a dotted
//! name (`enc2.stage1.block0.attn.q.weight`). Modules obtain their tensors through a
//! [`Scope`], which prefixes names the way nested modules are nested.
//!
//! Manifest layout (all integers little-endian):
//!
//! ```text
//! magic "ENFW" | version u32 = 1 | record count u32
//! per record: name_len u32 | name (utf-8) | dtype u8 (0 = f32, 1 = f64)
//!             | ndim u32 | dims u64 * ndim | raw values
//! sha-256 of every preceding byte (32 bytes)
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Shape, Tensor, Var};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ENFW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    /// Normal truncated at two standard deviations.
    TruncNormal {
        std: f64,
    },
    /// He-normal with `std = sqrt(2 / fan_out)`.
    KaimingFanOut {
        fan_out: usize,
    },
    Uniform {
        bound: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub var: Var,
    pub kind: ParamKind,
}

struct Inner {
    entries: IndexMap<String, Entry>,
    rng: ChaCha8Rng,
}

pub struct ParamStore {
    dtype: DType,
    device: Device,
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("len", &self.lock().entries.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Arc<Self> {
        Arc::new(Self {
            dtype,
            device: device.clone(),
            inner: Mutex::new(Inner {
                entries: IndexMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(self: &Arc<Self>) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    fn create(&self, name: String, shape: Shape, init: Init, kind: ParamKind) -> Result<Var> {
        let mut inner = self.lock();
        if let Some(existing) = inner.entries.get(&name) {
            if existing.var.shape() != &shape {
                return Err(Error::Shape(format!(
                    "parameter `{name}` requested as {shape:?} but exists as {:?}",
                    existing.var.shape()
                )));
            }
            return Ok(existing.var.clone());
        }
        let values = sample(&mut inner.rng, shape.elem_count(), init);
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        inner.entries.insert(name, Entry { var: var.clone(), kind });
        Ok(var)
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All entries in creation order.
    pub fn entries(&self) -> Vec<(String, Entry)> {
        self.lock()
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.lock()
            .entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock().entries.get(name).map(|e| e.var.clone())
    }

    /// Number of trainable scalars under the scope `prefix`.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.lock()
            .entries
            .iter()
            .filter(|(k, e)| e.kind == ParamKind::Trainable && relative(k, prefix).is_some())
            .map(|(_, e)| e.var.elem_count())
            .sum()
    }

    /// Copies every value into a name-keyed map of detached tensors.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        let inner = self.lock();
        let mut out = HashMap::with_capacity(inner.entries.len());
        for (k, e) in &inner.entries {
            out.insert(k.clone(), e.var.as_tensor().detach().copy()?);
        }
        Ok(out)
    }

    pub fn to_manifest(&self) -> Result<WeightManifest> {
        let inner = self.lock();
        let mut records = Vec::with_capacity(inner.entries.len());
        for (name, e) in &inner.entries {
            records.push(WeightRecord::from_tensor(name.clone(), e.var.as_tensor())?);
        }
        Ok(WeightManifest { records })
    }

    /// Assigns manifest records to the entries under `prefix`. Record names are
    /// relative to the prefix. With `strict`, records that match no entry are an error.
    pub fn assign(&self, prefix: &str, manifest: &WeightManifest, strict: bool) -> Result<usize> {
        let inner = self.lock();
        let by_name: HashMap<&str, &WeightRecord> = manifest.records.iter().map(|r| (r.name.as_str(), r)).collect();
        let mut missing = Vec::new();
        let mut assigned = 0;
        for (name, entry) in &inner.entries {
            let Some(rel) = relative(name, prefix) else {
                continue;
            };
            let Some(record) = by_name.get(rel) else {
                missing.push(rel.to_string());
                continue;
            };
            if record.shape != entry.var.dims() {
                return Err(Error::WeightMismatch(format!(
                    "`{rel}` has shape {:?} in the manifest but {:?} in the model",
                    record.shape,
                    entry.var.dims()
                )));
            }
            entry.var.set(&record.to_tensor(self.dtype, &self.device)?)?;
            assigned += 1;
        }
        if !missing.is_empty() {
            return Err(Error::WeightMismatch(format!(
                "missing records: {}",
                missing.join(", ")
            )));
        }
        if strict {
            let known: std::collections::HashSet<&str> =
                inner.entries.keys().filter_map(|k| relative(k, prefix)).collect();
            let extra: Vec<&str> = manifest
                .records
                .iter()
                .map(|r| r.name.as_str())
                .filter(|n| !known.contains(n))
                .collect();
            if !extra.is_empty() {
                return Err(Error::WeightMismatch(format!(
                    "unexpected records: {}",
                    extra.join(", ")
                )));
            }
        }
        Ok(assigned)
    }
}

fn sample(rng: &mut ChaCha8Rng, n: usize, init: Init) -> Vec<f64> {
    match init {
        Init::Const(v) => vec![v; n],
        Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        Init::TruncNormal { std } => {
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            (0..n)
                .map(|_| loop {
                    let z: f64 = normal.sample(rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect()
        }
        Init::KaimingFanOut { fan_out } => {
            let std = (2.0 / fan_out.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| normal.sample(rng)).collect()
        }
    }
}

/// A name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    store: Arc<ParamStore>,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let var = self
            .store
            .create(self.full(name), shape.into(), init, ParamKind::Trainable)?;
        Ok(var.as_tensor().clone())
    }

    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.store
            .create(self.full(name), shape.into(), init, ParamKind::Buffer)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &Arc<ParamStore> {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

impl WeightRecord {
    pub fn from_tensor(name: String, t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F64 => RecordData::F64(flat.to_vec1::<f64>()?),
            _ => RecordData::F32(flat.to_dtype(DType::F32)?.to_vec1::<f32>()?),
        };
        Ok(Self {
            name,
            shape: t.dims().to_vec(),
            data,
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = match &self.data {
            RecordData::F32(v) => Tensor::from_slice(v, self.shape.as_slice(), device)?,
            RecordData::F64(v) => Tensor::from_slice(v, self.shape.as_slice(), device)?,
        };
        Ok(t.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightManifest {
    pub records: Vec<WeightRecord>,
}

impl WeightManifest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            buf.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(r.name.as_bytes());
            buf.push(match r.data {
                RecordData::F32(_) => 0,
                RecordData::F64(_) => 1,
            });
            buf.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for d in &r.shape {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match &r.data {
                RecordData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
                RecordData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Integrity {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 4 + 4 + 4 + 32 {
            return Err(bad("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (corrupt or truncated file)"));
        }
        let mut cur = Cursor { buf: body, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let trunc = || bad("truncated record");
            let name_len = cur.u32().ok_or_else(trunc)? as usize;
            let name = std::str::from_utf8(cur.take(name_len).ok_or_else(trunc)?)
                .map_err(|_| bad("record name is not utf-8"))?
                .to_string();
            let dtype = cur.take(1).ok_or_else(trunc)?[0];
            let ndim = cur.u32().ok_or_else(trunc)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64().ok_or_else(trunc)? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = match dtype {
                0 => RecordData::F32(
                    cur.take(numel * 4)
                        .ok_or_else(trunc)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => RecordData::F64(
                    cur.take(numel * 8)
                        .ok_or_else(trunc)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(bad(&format!("unknown dtype tag {other}"))),
            };
            records.push(WeightRecord { name, shape, data });
        }
        if cur.pos != body.len() {
            return Err(bad("trailing bytes after last record"));
        }
        Ok(Self { records })
    }

    pub fn digest_hex(&self) -> String {
        let bytes = self.to_bytes();
        hex::encode(&bytes[bytes.len() - 32..])
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Records whose names start with `prefix`, renamed relative to it.
    pub fn subset(&self, prefix: &str) -> WeightManifest {
        WeightManifest {
            records: self
                .records
                .iter()
                .filter_map(|r| {
                    relative(&r.name, prefix).map(|rel| WeightRecord {
                        name: rel.to_string(),
                        ..r.clone()
                    })
                })
                .collect(),
        }
    }
}

/// `name` relative to the dotted scope `prefix`; `None` when outside it.
pub fn relative<'a>(name: &'a str, prefix: &str) -> Option<&'a str> {
    if prefix.is_empty() {
        return Some(name);
    }
    name.strip_prefix(prefix)?.strip_prefix('.')
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
