//! Portable tensor serialization: parameter stores, checkpoints and datasets.
//!
//! A blob is `magic(8) | dtype tag u32 | rank u32 | dims u64 × rank | data`,
//! all little-endian. A checkpoint directory holds `manifest.json` plus one
//! blob per tensor under `tensors/`. Tensor order is always lexicographic by
//! name; digests depend on it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BLOB_MAGIC: [u8; 8] = *b"SDTNSR\x00\x01";
pub const CHECKPOINT_FORMAT: &str = "sidetune-checkpoint";
pub const DATASET_FORMAT: &str = "sidetune-dataset";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_MANIFEST_FILE: &str = "dataset_manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
    I64,
}

impl Dtype {
    pub fn tag(self) -> u32 {
        match self {
            Dtype::F32 => 1,
            Dtype::U8 => 2,
            Dtype::I64 => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::U8),
            3 => Ok(Dtype::I64),
            other => Err(Error::UnsupportedDtype(format!("tag {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
            Dtype::I64 => 8,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "u8" => Ok(Dtype::U8),
            "i64" => Ok(Dtype::I64),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
            Dtype::I64 => "i64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::U8(_) => Dtype::U8,
            TensorData::I64(_) => Dtype::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U8(v) => v.clone(),
            TensorData::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_le_bytes(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U8 => TensorData::U8(bytes.to_vec()),
            Dtype::I64 => TensorData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }
}

/// One tensor with its name and shape.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: &[usize], data: TensorData) -> Result<Self> {
        let name = name.into();
        validate_name(&name)?;
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::tensor(&name, format!("shape {shape:?} has a zero dimension")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::tensor(
                &name,
                format!("shape {shape:?} implies {n} elements, data has {}", data.len()),
            ));
        }
        Ok(Self {
            name,
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

fn validate_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(Error::tensor(name, "names must be dot-separated [A-Za-z0-9_-] segments"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub record: TensorRecord,
    pub trainable: bool,
    /// Running statistics rather than an optimized weight.
    pub buffer: bool,
}

/// Named tensors partitioned into frozen and trainable sets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, StoredTensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: TensorRecord, trainable: bool, buffer: bool) -> Result<()> {
        if self.tensors.contains_key(&record.name) {
            return Err(Error::tensor(&record.name, "duplicate tensor name"));
        }
        self.tensors.insert(
            record.name.clone(),
            StoredTensor {
                record,
                trainable,
                buffer,
            },
        );
        Ok(())
    }

    pub fn insert_f32(&mut self, name: &str, shape: &[usize], data: Vec<f32>, trainable: bool) -> Result<()> {
        self.insert(TensorRecord::new(name, shape, TensorData::F32(data))?, trainable, false)
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut StoredTensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<StoredTensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Entries in canonical (lexicographic) order.
    pub fn iter(&self) -> impl Iterator<Item = &StoredTensor> {
        self.tensors.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn set_trainable(&mut self, name: &str, on: bool) -> bool {
        match self.tensors.get_mut(name) {
            Some(t) => {
                t.trainable = on;
                true
            }
            None => false,
        }
    }

    /// Moves every entry of `other` into `self`; names must not collide.
    pub fn merge(&mut self, other: ParameterStore) -> Result<()> {
        for (_, t) in other.tensors {
            self.insert(t.record, t.trainable, t.buffer)?;
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.iter().map(|t| t.record.numel()).sum()
    }
}

/// SHA-256 over the raw bytes of every tensor accepted by `keep`, in canonical order.
pub fn digest_where(store: &ParameterStore, mut keep: impl FnMut(&StoredTensor) -> bool) -> String {
    let mut h = Sha256::new();
    for t in store.iter().filter(|t| keep(t)) {
        h.update(t.record.data.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Digest of all frozen parameters. Running-statistics buffers are left out;
/// unchanged by any edit to trainable tensors.
pub fn frozen_digest(store: &ParameterStore) -> String {
    digest_where(store, |t| !t.trainable && !t.buffer)
}

pub fn encode_blob(record: &TensorRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * record.shape.len() + record.numel() * record.dtype().size());
    out.extend_from_slice(&BLOB_MAGIC);
    out.extend_from_slice(&record.dtype().tag().to_le_bytes());
    out.extend_from_slice(&(record.shape.len() as u32).to_le_bytes());
    for &d in &record.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&record.data.to_le_bytes());
    out
}

pub fn decode_blob(name: &str, bytes: &[u8]) -> Result<TensorRecord> {
    let short = |what: &str| Error::tensor(name, format!("truncated blob: {what}"));
    if bytes.len() < 16 {
        return Err(short("header"));
    }
    if bytes[..8] != BLOB_MAGIC {
        return Err(Error::tensor(name, "bad blob magic"));
    }
    let tag = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let dtype = Dtype::from_tag(tag)?;
    let rank = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let dims_end = 16 + 8 * rank;
    if bytes.len() < dims_end {
        return Err(short("dims"));
    }
    let shape: Vec<usize> = bytes[16..dims_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let want = shape.iter().product::<usize>() * dtype.size();
    let body = &bytes[dims_end..];
    if body.len() != want {
        return Err(Error::tensor(
            name,
            format!("truncated blob: expected {want} data bytes, found {}", body.len()),
        ));
    }
    TensorRecord::new(name, &shape, TensorData::from_le_bytes(dtype, body))
}

pub fn write_blob(path: &Path, record: &TensorRecord) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_blob(record)).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path, name: &str) -> Result<TensorRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_blob(name, &bytes)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub epoch: u64,
    /// Gate value α at save time, if the model has a free gate.
    pub gate_value: Option<f32>,
    pub config_digest: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorDescriptor {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    #[serde(default)]
    pub buffer: bool,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub metadata: CheckpointMeta,
    pub tensors: Vec<TensorDescriptor>,
}

fn to_json_pretty<S: Serialize>(v: &S) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

/// Writes a checkpoint directory. An existing directory at `dir` is replaced
/// only after the new one has been fully written next to it.
pub fn save_checkpoint(store: &ParameterStore, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    for t in store.iter() {
        if let TensorData::F32(v) = &t.record.data {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(t.record.name.clone()));
            }
        }
    }
    let staging = staging_path(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let tensor_dir = staging.join("tensors");
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
    let mut descriptors = Vec::with_capacity(store.len());
    for t in store.iter() {
        let file = format!("tensors/{}.bin", t.record.name);
        let bytes = encode_blob(&t.record);
        let path = staging.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        descriptors.push(TensorDescriptor {
            name: t.record.name.clone(),
            dtype: t.record.dtype().as_str().to_string(),
            shape: t.record.shape.clone(),
            trainable: t.trainable,
            buffer: t.buffer,
            file,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        version: 1,
        metadata: meta.clone(),
        tensors: descriptors,
    };
    let mpath = staging.join(MANIFEST_FILE);
    fs::write(&mpath, to_json_pretty(&manifest)).map_err(|e| Error::io(&mpath, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

fn staging_path(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text).map_err(|e| Error::Manifest {
        path: mpath.clone(),
        message: e.to_string(),
    })?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Manifest {
            path: mpath,
            message: format!("unexpected format {:?}", manifest.format),
        });
    }
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParameterStore, CheckpointMeta)> {
    let manifest = read_manifest(dir)?;
    let mut store = ParameterStore::new();
    for d in &manifest.tensors {
        let dtype = Dtype::parse(&d.dtype)?;
        let path = dir.join(&d.file);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::tensor(&d.name, format!("missing blob {}", path.display())),
            _ => Error::io(&path, e),
        })?;
        let record = decode_blob(&d.name, &bytes)?;
        if record.dtype() != dtype {
            return Err(Error::tensor(
                &d.name,
                format!("dtype {} in manifest, {} in blob", d.dtype, record.dtype().as_str()),
            ));
        }
        if record.shape != d.shape {
            return Err(Error::Shape(format!(
                "tensor {}: manifest shape {:?}, blob shape {:?}",
                d.name, d.shape, record.shape
            )));
        }
        if hex::encode(Sha256::digest(&bytes)) != d.sha256 {
            return Err(Error::Checksum(d.name.clone()));
        }
        store.insert(record, d.trainable, d.buffer)?;
    }
    Ok((store, manifest.metadata))
}

/// One case: co-registered image and label volumes `[D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub dims: [usize; 3],
    pub image: Vec<f32>,
    pub label: Vec<u8>,
    /// Voxel size in mm along (D, H, W).
    pub spacing: [f64; 3],
}

impl CaseRecord {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let n: usize = self.dims.iter().product();
        if self.image.len() != n || self.label.len() != n {
            return Err(Error::Data(format!(
                "case {}: image/label sizes disagree with dims {:?}",
                self.case_id, self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("case {}: spacing must be positive", self.case_id)));
        }
        if let Some(&bad) = self.label.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Data(format!(
                "case {}: label value {bad} is not below num_classes {num_classes}",
                self.case_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub split: Split,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub num_classes: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
    pub cases: Vec<CaseEntry>,
}

impl DatasetManifest {
    pub fn new(num_classes: usize) -> Self {
        Self {
            format: DATASET_FORMAT.to_string(),
            version: 1,
            num_classes,
            class_names: Vec::new(),
            cases: Vec::new(),
        }
    }
}

pub fn case_dir(root: &Path, id: &str) -> PathBuf {
    root.join("cases").join(id)
}

pub fn write_case(root: &Path, case: &CaseRecord) -> Result<()> {
    let dir = case_dir(root, &case.case_id);
    let image = TensorRecord::new("image", &case.dims, TensorData::F32(case.image.clone()))?;
    let label = TensorRecord::new("label", &case.dims, TensorData::U8(case.label.clone()))?;
    write_blob(&dir.join("image.bin"), &image)?;
    write_blob(&dir.join("label.bin"), &label)
}

pub fn read_case(root: &Path, entry: &CaseEntry) -> Result<CaseRecord> {
    let dir = case_dir(root, &entry.id);
    let image = read_blob(&dir.join("image.bin"), &format!("{}.image", entry.id))?;
    let label = read_blob(&dir.join("label.bin"), &format!("{}.label", entry.id))?;
    for r in [&image, &label] {
        if r.shape != entry.dims {
            return Err(Error::Shape(format!(
                "{}: shape {:?} but manifest says {:?}",
                r.name, r.shape, entry.dims
            )));
        }
    }
    let (TensorData::F32(image), TensorData::U8(label)) = (image.data, label.data) else {
        return Err(Error::Data(format!("case {}: image must be f32 and label u8", entry.id)));
    };
    Ok(CaseRecord {
        case_id: entry.id.clone(),
        dims: entry.dims,
        image,
        label,
        spacing: entry.spacing,
    })
}

pub fn write_dataset_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join(DATASET_MANIFEST_FILE);
    fs::write(&path, to_json_pretty(manifest)).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(DATASET_MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_slice(&text).map_err(|e| Error::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if m.format != DATASET_FORMAT {
        return Err(Error::Manifest {
            path,
            message: format!("unexpected format {:?}", m.format),
        });
    }
    Ok(m)
}
