//! The ATNZ v1 tensor container: a JSON manifest (`<stem>.json`) describing
//! named entries plus one little-endian binary blob (`<stem>.bin`) holding
//! their row-major values. Round trips at matching dtype are bit-exact;
//! storing f64 data as f32 is a documented lossy path.
//!
//! A manifest may also carry an `attention` block naming which weight
//! structure the entries encode (`mha`, `gqa`, `mla`, `tucker`), which is
//! what the CLI commands read and write.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tuckattn_core::attention::{stack_attention_tensors, AttentionTensorPair, MhaWeights};
use tuckattn_core::tensor::{Matrix, Tensor3};
use tuckattn_core::tucker::TuckerAttentionParams;
use tuckattn_core::variants::{gqa_lift, mla_lift, GqaWeights, MlaWeights};

pub const MAGIC: &str = "ATNZ";
pub const VERSION: u32 = 1;

/// Errors from reading or writing containers.
#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse failure: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad magic: expected {MAGIC:?}, found {found:?}")]
    MagicMismatch { found: String },
    #[error("unsupported container version {found} (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("blob is truncated: entry {name} needs bytes {offset}..{end} but the blob has {len}")]
    TruncatedBlob {
        name: String,
        offset: u64,
        end: u64,
        len: u64,
    },
    #[error("entry {name}: byte length {byte_length} does not match shape {shape:?} of dtype {dtype}")]
    ShapeLengthMismatch {
        name: String,
        shape: Vec<usize>,
        dtype: String,
        byte_length: u64,
    },
    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),
    #[error("missing entry {0:?}")]
    MissingEntry(String),
    #[error("entry {name}: expected shape {expected}, found {found:?}")]
    EntryShape {
        name: String,
        expected: String,
        found: Vec<usize>,
    },
    #[error("container does not describe attention weights (no attention block)")]
    NotAttentionWeights,
    #[error("unknown attention kind {0:?}")]
    UnknownKind(String),
    #[error("inconsistent weights: {0}")]
    Model(String),
}

pub type IoResult<T> = Result<T, IoError>;

impl From<tuckattn_core::Error> for IoError {
    fn from(e: tuckattn_core::Error) -> Self {
        IoError::Model(e.to_string())
    }
}

/// Element type of a stored entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn parse(s: &str) -> IoResult<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(IoError::UnknownDtype(other.to_string())),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Stored values of one entry.
#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Values {
    pub fn dtype(&self) -> Dtype {
        match self {
            Values::F32(_) => Dtype::F32,
            Values::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64 (exact for f32 storage).
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Values::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Values::F64(v) => v.clone(),
        }
    }
}

/// One named tensor: a shape and its values.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub values: Values,
}

/// Metadata block naming which attention structure a container encodes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttentionMeta {
    pub kind: String,
    pub n_heads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_kv: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_kv: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_dim: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    magic: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attention: Option<AttentionMeta>,
    entries: Vec<ManifestEntry>,
}

/// An ordered set of named tensors plus optional attention metadata.
#[derive(Debug, Clone, Default)]
pub struct TensorSet {
    entries: Vec<(String, Entry)>,
    pub attention: Option<AttentionMeta>,
}

impl TensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn insert(&mut self, name: &str, entry: Entry) {
        assert_eq!(
            entry.shape.iter().product::<usize>(),
            entry.values.len(),
            "entry {name}: shape does not match value count"
        );
        self.entries.push((name.to_string(), entry));
    }

    pub fn insert_f64(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        self.insert(
            name,
            Entry {
                shape,
                values: Values::F64(data),
            },
        );
    }

    /// Store with narrowing to f32 (lossy for f64 sources).
    pub fn insert_f32(&mut self, name: &str, shape: Vec<usize>, data: &[f64]) {
        self.insert(
            name,
            Entry {
                shape,
                values: Values::F32(data.iter().map(|&x| x as f32).collect()),
            },
        );
    }

    pub fn insert_matrix(&mut self, name: &str, m: &Matrix) {
        self.insert_f64(name, vec![m.rows(), m.cols()], m.data().to_vec());
    }

    pub fn insert_tensor3(&mut self, name: &str, t: &Tensor3) {
        let (a, b, c) = t.dims();
        self.insert_f64(name, vec![a, b, c], t.data().to_vec());
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
    }

    fn required(&self, name: &str) -> IoResult<&Entry> {
        self.get(name)
            .ok_or_else(|| IoError::MissingEntry(name.to_string()))
    }

    pub fn matrix(&self, name: &str) -> IoResult<Matrix> {
        let e = self.required(name)?;
        if e.shape.len() != 2 {
            return Err(IoError::EntryShape {
                name: name.to_string(),
                expected: "a rank-2 shape".to_string(),
                found: e.shape.clone(),
            });
        }
        Ok(Matrix::from_vec(e.shape[0], e.shape[1], e.values.to_f64())
            .expect("shape checked against value count"))
    }

    pub fn tensor3(&self, name: &str) -> IoResult<Tensor3> {
        let e = self.required(name)?;
        if e.shape.len() != 3 {
            return Err(IoError::EntryShape {
                name: name.to_string(),
                expected: "a rank-3 shape".to_string(),
                found: e.shape.clone(),
            });
        }
        Ok(
            Tensor3::from_vec((e.shape[0], e.shape[1], e.shape[2]), e.values.to_f64())
                .expect("shape checked against value count"),
        )
    }

    /// Write `<stem>.json` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> IoResult<()> {
        let mut blob: Vec<u8> = Vec::new();
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, entry) in &self.entries {
            let byte_offset = blob.len() as u64;
            match &entry.values {
                Values::F32(v) => {
                    for x in v {
                        blob.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Values::F64(v) => {
                    for x in v {
                        blob.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
            entries.push(ManifestEntry {
                name: name.clone(),
                dtype: entry.values.dtype().name().to_string(),
                shape: entry.shape.clone(),
                byte_offset,
                byte_length: blob.len() as u64 - byte_offset,
            });
        }
        let manifest = Manifest {
            magic: MAGIC.to_string(),
            version: VERSION,
            attention: self.attention.clone(),
            entries,
        };
        let mut json = fs::File::create(manifest_path(stem))?;
        serde_json::to_writer_pretty(&mut json, &manifest)?;
        json.write_all(b"\n")?;
        fs::write(blob_path(stem), &blob)?;
        Ok(())
    }

    /// Read a container saved by [`TensorSet::save`]. The manifest is fully
    /// validated before any blob bytes are interpreted.
    pub fn load(stem: &Path) -> IoResult<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path(stem))?)?;
        if manifest.magic != MAGIC {
            return Err(IoError::MagicMismatch {
                found: manifest.magic,
            });
        }
        if manifest.version != VERSION {
            return Err(IoError::VersionMismatch {
                found: manifest.version,
            });
        }
        let blob = fs::read(blob_path(stem))?;
        // Validate every entry against the blob before decoding.
        for e in &manifest.entries {
            let dtype = Dtype::parse(&e.dtype)?;
            let expected = (e.shape.iter().product::<usize>() * dtype.width()) as u64;
            if expected != e.byte_length {
                return Err(IoError::ShapeLengthMismatch {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    dtype: e.dtype.clone(),
                    byte_length: e.byte_length,
                });
            }
            let end = e.byte_offset + e.byte_length;
            if end > blob.len() as u64 {
                return Err(IoError::TruncatedBlob {
                    name: e.name.clone(),
                    offset: e.byte_offset,
                    end,
                    len: blob.len() as u64,
                });
            }
        }
        let mut set = TensorSet {
            entries: Vec::with_capacity(manifest.entries.len()),
            attention: manifest.attention,
        };
        for e in &manifest.entries {
            let dtype = Dtype::parse(&e.dtype)?;
            let bytes = &blob[e.byte_offset as usize..(e.byte_offset + e.byte_length) as usize];
            let values = match dtype {
                Dtype::F32 => Values::F32(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::F64 => Values::F64(
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            set.entries.push((
                e.name.clone(),
                Entry {
                    shape: e.shape.clone(),
                    values,
                },
            ));
        }
        Ok(set)
    }
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

// --- attention weight codecs --------------------------------------------------

/// Any of the supported attention weight structures.
#[derive(Debug, Clone)]
pub enum AnyWeights {
    Mha(MhaWeights),
    Gqa(GqaWeights),
    Mla(MlaWeights),
    Tucker(TuckerAttentionParams),
}

impl AnyWeights {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyWeights::Mha(_) => "mha",
            AnyWeights::Gqa(_) => "gqa",
            AnyWeights::Mla(_) => "mla",
            AnyWeights::Tucker(_) => "tucker",
        }
    }

    /// Stacked tensor pair of whatever the weights encode.
    pub fn lift(&self) -> AttentionTensorPair {
        match self {
            AnyWeights::Mha(w) => stack_attention_tensors(w),
            AnyWeights::Gqa(w) => gqa_lift(w),
            AnyWeights::Mla(w) => mla_lift(w),
            AnyWeights::Tucker(p) => tuckattn_core::tucker::materialize(p),
        }
    }
}

pub fn tensor_set_from_weights(w: &AnyWeights) -> TensorSet {
    let mut set = TensorSet::new();
    match w {
        AnyWeights::Mha(w) => {
            set.attention = Some(AttentionMeta {
                kind: "mha".to_string(),
                n_heads: w.n_heads,
                n_kv: None,
                shared_kv: None,
                scale_dim: None,
            });
            set.insert_matrix("wq", &w.wq);
            set.insert_matrix("wk", &w.wk);
            set.insert_matrix("wv", &w.wv);
            set.insert_matrix("wo", &w.wo);
        }
        AnyWeights::Gqa(w) => {
            set.attention = Some(AttentionMeta {
                kind: "gqa".to_string(),
                n_heads: w.n_heads,
                n_kv: Some(w.n_kv),
                shared_kv: None,
                scale_dim: None,
            });
            set.insert_matrix("wq", &w.wq);
            set.insert_tensor3("wk_groups", &blocks_to_tensor(&w.wk_groups));
            set.insert_tensor3("wv_groups", &blocks_to_tensor(&w.wv_groups));
            set.insert_matrix("wo", &w.wo);
        }
        AnyWeights::Mla(w) => {
            set.attention = Some(AttentionMeta {
                kind: "mla".to_string(),
                n_heads: w.n_heads,
                n_kv: None,
                shared_kv: Some(w.shared_kv()),
                scale_dim: None,
            });
            set.insert_matrix("w_dq", &w.w_dq);
            set.insert_tensor3("w_uq", &blocks_to_tensor(&w.w_uq));
            set.insert_matrix("w_dkv", &w.w_dkv);
            set.insert_tensor3("w_uk", &blocks_to_tensor(&w.w_uk));
            set.insert_tensor3("w_uv", &blocks_to_tensor(&w.w_uv));
            if let Some(dv) = &w.w_dv {
                set.insert_matrix("w_dv", dv);
            }
            set.insert_matrix("wo", &w.wo);
        }
        AnyWeights::Tucker(p) => {
            set.attention = Some(AttentionMeta {
                kind: "tucker".to_string(),
                n_heads: p.n_heads(),
                n_kv: None,
                shared_kv: Some(p.shared_kv()),
                scale_dim: Some(p.scale_dim),
            });
            set.insert_tensor3("core_pre", &p.core_pre);
            set.insert_tensor3("core_post", &p.core_post);
            set.insert_matrix("u1", &p.u1);
            set.insert_matrix("u2", &p.u2);
            set.insert_matrix("u3", &p.u3);
            set.insert_matrix("ut1", &p.ut1);
            set.insert_matrix("ut2", &p.ut2);
            if let Some(ut3) = &p.ut3 {
                set.insert_matrix("ut3", ut3);
            }
        }
    }
    set
}

pub fn weights_from_tensor_set(set: &TensorSet) -> IoResult<AnyWeights> {
    let meta = set
        .attention
        .as_ref()
        .ok_or(IoError::NotAttentionWeights)?;
    match meta.kind.as_str() {
        "mha" => Ok(AnyWeights::Mha(MhaWeights::new(
            meta.n_heads,
            set.matrix("wq")?,
            set.matrix("wk")?,
            set.matrix("wv")?,
            set.matrix("wo")?,
        )?)),
        "gqa" => {
            let n_kv = meta
                .n_kv
                .ok_or_else(|| IoError::Model("grouped weights need n_kv metadata".into()))?;
            Ok(AnyWeights::Gqa(GqaWeights::new(
                meta.n_heads,
                n_kv,
                set.matrix("wq")?,
                tensor_to_blocks(&set.tensor3("wk_groups")?),
                tensor_to_blocks(&set.tensor3("wv_groups")?),
                set.matrix("wo")?,
            )?))
        }
        "mla" => {
            let w_dv = if set.get("w_dv").is_some() {
                Some(set.matrix("w_dv")?)
            } else {
                None
            };
            Ok(AnyWeights::Mla(MlaWeights::new(
                meta.n_heads,
                set.matrix("w_dq")?,
                tensor_to_blocks(&set.tensor3("w_uq")?),
                set.matrix("w_dkv")?,
                tensor_to_blocks(&set.tensor3("w_uk")?),
                tensor_to_blocks(&set.tensor3("w_uv")?),
                w_dv,
                set.matrix("wo")?,
            )?))
        }
        "tucker" => {
            let ut3 = if set.get("ut3").is_some() {
                Some(set.matrix("ut3")?)
            } else {
                None
            };
            let scale_dim = meta.scale_dim.ok_or_else(|| {
                IoError::Model("factorized weights need scale_dim metadata".into())
            })?;
            Ok(AnyWeights::Tucker(TuckerAttentionParams::new(
                set.tensor3("core_pre")?,
                set.tensor3("core_post")?,
                set.matrix("u1")?,
                set.matrix("u2")?,
                set.matrix("u3")?,
                set.matrix("ut1")?,
                set.matrix("ut2")?,
                ut3,
                scale_dim,
            )?))
        }
        other => Err(IoError::UnknownKind(other.to_string())),
    }
}

pub fn save_weights(w: &AnyWeights, stem: &Path) -> IoResult<()> {
    tensor_set_from_weights(w).save(stem)
}

pub fn load_weights(stem: &Path) -> IoResult<AnyWeights> {
    weights_from_tensor_set(&TensorSet::load(stem)?)
}

fn blocks_to_tensor(blocks: &[Matrix]) -> Tensor3 {
    let rows = blocks.first().map(|m| m.rows()).unwrap_or(0);
    let cols = blocks.first().map(|m| m.cols()).unwrap_or(0);
    let mut t = Tensor3::zeros((blocks.len(), rows, cols));
    for (i, b) in blocks.iter().enumerate() {
        t.set_slice1(i, b);
    }
    t
}

fn tensor_to_blocks(t: &Tensor3) -> Vec<Matrix> {
    (0..t.dims().0).map(|i| t.slice1(i)).collect()
}
