//! Safetensors checkpoints held as named `f32` arrays.
//!
//! Layout: an 8-byte little-endian header length `N`, `N` bytes of UTF-8 JSON
//! mapping tensor names to `{dtype, shape, data_offsets}` (plus an optional
//! `__metadata__` string map), then the raw little-endian tensor bytes.
//! Writers here emit sorted keys, lexicographic data order, and pad the header
//! with spaces to a multiple of 8 so that output bytes depend only on content.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use half::{bf16, f16};
use nalgebra::DMatrix;
use serde_json::{Map, Value};

use crate::canonical;

const METADATA_KEY: &str = "__metadata__";
// Refuse headers above this size instead of attempting the allocation.
const MAX_HEADER_LEN: u64 = 256 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("file too short for an 8-byte header length ({0} bytes)")]
    Truncated(usize),
    #[error("header length {declared} exceeds the {available} bytes available")]
    HeaderLength { declared: u64, available: u64 },
    #[error("header is not valid JSON: {0}")]
    HeaderJson(String),
    #[error("tensor `{tensor}`: {reason}")]
    InvalidEntry { tensor: String, reason: String },
    #[error("tensor `{tensor}`: unsupported dtype `{dtype}`")]
    UnsupportedDtype { tensor: String, dtype: String },
    #[error("tensor `{tensor}`: bad data span: {reason}")]
    DataSpan { tensor: String, reason: String },
    #[error("illegal tensor name {name:?}: {reason}")]
    InvalidName { name: String, reason: String },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensors differ in shape between checkpoints: {}", format_mismatches(.0))]
    ShapeMismatch(Vec<ShapeMismatch>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeMismatch {
    pub name: String,
    pub base: Vec<usize>,
    pub adapted: Vec<usize>,
}

fn format_mismatches(list: &[ShapeMismatch]) -> String {
    list.iter()
        .map(|m| format!("`{}` {:?} vs {:?}", m.name, m.base, m.adapted))
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Storage dtype of a tensor on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How dtypes are chosen when writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtypePolicy {
    /// Write each tensor in its recorded dtype (f16/bf16 round to nearest even).
    Preserve,
    /// Write every tensor as F32; exact for the in-memory values.
    ForceF32,
}

/// One named tensor. Values are always held as `f32`; `dtype` records the
/// on-disk storage type it was read from or should be written as.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        dtype: DType,
        data: Vec<f32>,
    ) -> Result<Self> {
        let name = name.into();
        check_shape(&name, &shape, data.len())?;
        Ok(Self {
            name,
            shape,
            dtype,
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows and columns of the 2-D view used for spectral analysis. Rank-2
    /// tensors keep their shape; every other rank is viewed as `1 x numel`.
    pub fn matrix_dims(&self) -> (usize, usize) {
        if self.shape.len() == 2 {
            (self.shape[0], self.shape[1])
        } else {
            (1, self.numel())
        }
    }

    /// The 2-D view widened to `f64`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let (rows, cols) = self.matrix_dims();
        DMatrix::from_row_iterator(rows, cols, self.data.iter().map(|&v| v as f64))
    }
}

fn check_shape(name: &str, shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(CheckpointError::InvalidEntry {
            tensor: name.to_string(),
            reason: "scalar (rank-0) tensors are not supported".into(),
        });
    }
    if shape.contains(&0) {
        return Err(CheckpointError::InvalidEntry {
            tensor: name.to_string(),
            reason: format!("shape {shape:?} has a zero dimension"),
        });
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| CheckpointError::InvalidEntry {
            tensor: name.to_string(),
            reason: format!("shape {shape:?} overflows"),
        })?;
    if numel != len {
        return Err(CheckpointError::InvalidEntry {
            tensor: name.to_string(),
            reason: format!("shape {shape:?} needs {numel} values, got {len}"),
        });
    }
    Ok(())
}

fn check_name(name: &str) -> Result<()> {
    let reason = if name.is_empty() {
        "empty name"
    } else if name == METADATA_KEY {
        "reserved for metadata"
    } else if name.chars().any(char::is_control) {
        "contains control characters"
    } else {
        return Ok(());
    };
    Err(CheckpointError::InvalidName {
        name: name.to_string(),
        reason: reason.into(),
    })
}

/// A set of named tensors plus pass-through string metadata. Iteration is
/// lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, TensorRecord>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: TensorRecord) -> Result<()> {
        if self.tensors.contains_key(&record.name) {
            return Err(CheckpointError::DuplicateName(record.name));
        }
        self.tensors.insert(record.name.clone(), record);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TensorRecord> {
        self.tensors.values()
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

pub fn save_checkpoint(
    ckpt: &Checkpoint,
    path: impl AsRef<Path>,
    policy: DtypePolicy,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(ckpt, policy)?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

fn parse_entry(name: &str, value: &Value) -> Result<Entry> {
    let bad = |reason: &str| CheckpointError::InvalidEntry {
        tensor: name.to_string(),
        reason: reason.to_string(),
    };
    let obj = value.as_object().ok_or_else(|| bad("entry is not an object"))?;
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing string `dtype`"))?;
    let dtype = DType::parse(dtype_str).ok_or_else(|| CheckpointError::UnsupportedDtype {
        tensor: name.to_string(),
        dtype: dtype_str.to_string(),
    })?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing array `shape`"))?
        .iter()
        .map(|d| d.as_u64().and_then(|d| usize::try_from(d).ok()))
        .collect::<Option<Vec<usize>>>()
        .ok_or_else(|| bad("`shape` must hold non-negative integers"))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing array `data_offsets`"))?;
    let offsets = offsets
        .iter()
        .map(|d| d.as_u64().and_then(|d| usize::try_from(d).ok()))
        .collect::<Option<Vec<usize>>>()
        .filter(|o| o.len() == 2)
        .ok_or_else(|| bad("`data_offsets` must be two non-negative integers"))?;
    Ok(Entry {
        name: name.to_string(),
        dtype,
        shape,
        begin: offsets[0],
        end: offsets[1],
    })
}

/// Decode a checkpoint from the raw bytes of a safetensors file.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&bytes[..8]);
    let header_len = u64::from_le_bytes(len_bytes);
    let available = (bytes.len() - 8) as u64;
    if header_len > available || header_len > MAX_HEADER_LEN {
        return Err(CheckpointError::HeaderLength {
            declared: header_len,
            available,
        });
    }
    let header_end = 8 + header_len as usize;
    let header: Value = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| CheckpointError::HeaderJson(e.to_string()))?;
    let header = match header {
        Value::Object(map) => map,
        _ => return Err(CheckpointError::HeaderJson("header is not an object".into())),
    };
    let data = &bytes[header_end..];

    let mut metadata = BTreeMap::new();
    let mut entries = Vec::with_capacity(header.len());
    for (key, value) in &header {
        if key == METADATA_KEY {
            let map = value.as_object().ok_or_else(|| {
                CheckpointError::HeaderJson("`__metadata__` is not an object".into())
            })?;
            for (k, v) in map {
                let v = v.as_str().ok_or_else(|| {
                    CheckpointError::HeaderJson(format!("metadata value for `{k}` is not a string"))
                })?;
                metadata.insert(k.clone(), v.to_string());
            }
        } else {
            entries.push(parse_entry(key, value)?);
        }
    }

    // Spans must tile the data section exactly: sorted, contiguous, no overlap.
    entries.sort_by(|a, b| (a.begin, a.end, &a.name).cmp(&(b.begin, b.end, &b.name)));
    let mut cursor = 0usize;
    for e in &entries {
        let span_err = |reason: String| CheckpointError::DataSpan {
            tensor: e.name.clone(),
            reason,
        };
        if e.end < e.begin {
            return Err(span_err(format!("end {} before begin {}", e.end, e.begin)));
        }
        if e.end > data.len() {
            return Err(span_err(format!(
                "span [{}, {}) exceeds the {} data bytes",
                e.begin,
                e.end,
                data.len()
            )));
        }
        if e.begin < cursor {
            return Err(span_err(format!(
                "span [{}, {}) overlaps the previous tensor",
                e.begin, e.end
            )));
        }
        if e.begin > cursor {
            return Err(span_err(format!(
                "gap before span [{}, {}) (previous ends at {cursor})",
                e.begin, e.end
            )));
        }
        let numel: usize = e.shape.iter().product();
        let expected = numel * e.dtype.size();
        if e.end - e.begin != expected {
            return Err(span_err(format!(
                "span of {} bytes does not hold {:?} {} values ({expected} bytes)",
                e.end - e.begin,
                e.shape,
                e.dtype
            )));
        }
        cursor = e.end;
    }
    if cursor != data.len() {
        return Err(CheckpointError::DataSpan {
            tensor: entries.last().map(|e| e.name.clone()).unwrap_or_default(),
            reason: format!(
                "{} trailing data bytes not covered by any tensor",
                data.len() - cursor
            ),
        });
    }

    let mut ckpt = Checkpoint {
        tensors: BTreeMap::new(),
        metadata,
    };
    for e in entries {
        let raw = &data[e.begin..e.end];
        let values = decode(raw, e.dtype);
        ckpt.insert(TensorRecord::new(e.name, e.shape, e.dtype, values)?)?;
    }
    Ok(ckpt)
}

fn decode(raw: &[u8], dtype: DType) -> Vec<f32> {
    match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        DType::F16 => raw
            .chunks_exact(2)
            .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
        DType::BF16 => raw
            .chunks_exact(2)
            .map(|b| bf16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
    }
}

fn encode(values: &[f32], dtype: DType, out: &mut Vec<u8>) {
    match dtype {
        DType::F32 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F16 => values
            .iter()
            .for_each(|&v| out.extend_from_slice(&f16::from_f32(v).to_le_bytes())),
        DType::BF16 => values
            .iter()
            .for_each(|&v| out.extend_from_slice(&bf16::from_f32(v).to_le_bytes())),
    }
}

/// Encode a checkpoint as safetensors bytes.
pub fn to_bytes(ckpt: &Checkpoint, policy: DtypePolicy) -> Result<Vec<u8>> {
    let mut header = Map::new();
    let mut data = Vec::new();
    for record in ckpt.tensors.values() {
        check_name(&record.name)?;
        check_shape(&record.name, &record.shape, record.data.len())?;
        let dtype = match policy {
            DtypePolicy::Preserve => record.dtype,
            DtypePolicy::ForceF32 => DType::F32,
        };
        let begin = data.len();
        encode(&record.data, dtype, &mut data);
        let mut entry = Map::new();
        entry.insert("dtype".into(), Value::from(dtype.as_str()));
        entry.insert("shape".into(), Value::from(record.shape.clone()));
        entry.insert("data_offsets".into(), Value::from(vec![begin, data.len()]));
        header.insert(record.name.clone(), Value::Object(entry));
    }
    if !ckpt.metadata.is_empty() {
        let meta: Map<String, Value> = ckpt
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::from(v.as_str())))
            .collect();
        header.insert(METADATA_KEY.into(), Value::Object(meta));
    }
    let mut header_bytes = canonical::to_canonical_string(&Value::Object(header)).into_bytes();
    while !header_bytes.len().is_multiple_of(8) {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + data.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Base/adapted tensors sharing a name and shape.
#[derive(Debug, Clone, Copy)]
pub struct TensorPair<'a> {
    pub base: &'a TensorRecord,
    pub adapted: &'a TensorRecord,
}

impl TensorPair<'_> {
    pub fn name(&self) -> &str {
        &self.base.name
    }
}

#[derive(Debug, Clone)]
pub struct Alignment<'a> {
    /// Matched pairs in lexicographic name order.
    pub pairs: Vec<TensorPair<'a>>,
    pub only_in_base: Vec<String>,
    pub only_in_adapted: Vec<String>,
}

impl Alignment<'_> {
    /// Names present in exactly one of the two checkpoints.
    pub fn unmatched(&self) -> Vec<&str> {
        let mut all: Vec<&str> = self
            .only_in_base
            .iter()
            .chain(&self.only_in_adapted)
            .map(String::as_str)
            .collect();
        all.sort_unstable();
        all
    }
}

/// Match tensors by exact name. Every same-name pair with differing shapes is
/// reported in a single error.
pub fn aligned_pairs<'a>(base: &'a Checkpoint, adapted: &'a Checkpoint) -> Result<Alignment<'a>> {
    let mut pairs = Vec::new();
    let mut mismatches = Vec::new();
    let mut only_in_base = Vec::new();
    for (name, b) in &base.tensors {
        match adapted.tensors.get(name) {
            Some(a) if a.shape == b.shape => pairs.push(TensorPair { base: b, adapted: a }),
            Some(a) => mismatches.push(ShapeMismatch {
                name: name.clone(),
                base: b.shape.clone(),
                adapted: a.shape.clone(),
            }),
            None => only_in_base.push(name.clone()),
        }
    }
    if !mismatches.is_empty() {
        return Err(CheckpointError::ShapeMismatch(mismatches));
    }
    let only_in_adapted = adapted
        .tensors
        .keys()
        .filter(|n| !base.tensors.contains_key(*n))
        .cloned()
        .collect();
    Ok(Alignment {
        pairs,
        only_in_base,
        only_in_adapted,
    })
}
