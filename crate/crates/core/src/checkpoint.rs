//! Single-file checkpoint format.
//!
//! ```text
//! "PRNC1\n"                 6 bytes magic
//! header_len                u64 little-endian
//! header                    UTF-8 JSON, keys sorted, space-padded so the
//!                           payload starts on a 64-byte file offset
//! payload                   f32 little-endian tensors, each starting on a
//!                           64-byte boundary relative to the payload start,
//!                           zero-filled gaps
//! ```
//!
//! The full layout is documented in `docs/format.md`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{expected_tensors, init_scratch, ModelConfig, ModelWeights};
use crate::pruning::PruneRecord;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"PRNC1\n";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;

/// Seed used for the classifier head when a file ships without one.
pub const MISSING_HEAD_SEED: u64 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes: not a checkpoint file")]
    BadMagic,
    #[error("unsupported format version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("header is not valid: {0}")]
    BadHeader(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unsupported dtype {dtype} for {name}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("{name}: byte_length exceeds file")]
    Truncated { name: String },
    #[error("{name}: byte_length {byte_length} does not match shape {shape:?}")]
    LengthMismatch {
        name: String,
        byte_length: u64,
        shape: Vec<usize>,
    },
    #[error("{name}: tensor overlaps the previous one or is misaligned")]
    BadOffset { name: String },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model_config: ModelConfig,
    #[serde(default)]
    pub prune_records: Vec<PruneRecord>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub weights: ModelWeights<T>,
    pub config: ModelConfig,
    pub records: Vec<PruneRecord>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes to the exact byte image written by [`save`].
pub fn to_bytes<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    records: &[PruneRecord],
) -> Result<Vec<u8>, CheckpointError> {
    let mut tensors = BTreeMap::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in weights.named_tensors() {
        payload.resize(align_up(payload.len()), 0);
        let offset = payload.len();
        for &x in t.data() {
            payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        tensors.insert(
            name,
            TensorEntry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                byte_offset: offset as u64,
                byte_length: (payload.len() - offset) as u64,
            },
        );
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model_config: config.clone(),
        prune_records: records.to_vec(),
        tensors,
    };
    // Round-tripping through `Value` sorts every object's keys.
    let value = serde_json::to_value(&header).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let mut json = serde_json::to_string(&value).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let prefix = MAGIC.len() + 8;
    json.extend(std::iter::repeat_n(' ', align_up(prefix + json.len()) - prefix - json.len()));

    let mut out = Vec::with_capacity(prefix + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    records: &[PruneRecord],
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(weights, config, records)?)?;
    Ok(())
}

/// Parses and validates the header, returning it with the payload offset.
pub fn read_header(bytes: &[u8]) -> Result<(Header, usize), CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len_bytes: [u8; 8] = bytes
        .get(6..14)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| CheckpointError::BadHeader("file ends inside the header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_end = 14usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::BadHeader("header length exceeds file".into()))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes[14..header_end])
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CheckpointError::BadHeader("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(CheckpointError::UnsupportedVersion(version as u32));
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    Ok((header, header_end))
}

/// Reads, validates and decodes a checkpoint into scalar type `T`.
///
/// A file without `classifier.weight`/`classifier.bias` (as written by
/// exporters of pretrained encoders) loads with a freshly initialized head.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    let (header, payload_start) = read_header(bytes)?;
    let config = header.model_config;
    config.validate().map_err(|e| CheckpointError::Config(e.to_string()))?;
    let payload = &bytes[payload_start..];

    let mut entries: Vec<(&String, &TensorEntry)> = header.tensors.iter().collect();
    entries.sort_by_key(|(_, e)| e.byte_offset);
    let mut cursor = 0u64;
    for (name, e) in &entries {
        if e.byte_offset < cursor || e.byte_offset % ALIGN as u64 != 0 {
            return Err(CheckpointError::BadOffset { name: (*name).clone() });
        }
        cursor = e.byte_offset + e.byte_length;
    }

    let expected = expected_tensors(&config);
    let mut named = BTreeMap::new();
    for (name, shape) in &expected {
        let optional_head = name.starts_with("classifier.");
        let Some(entry) = header.tensors.get(name) else {
            if optional_head {
                continue;
            }
            return Err(CheckpointError::MissingTensor(name.clone()));
        };
        if entry.dtype != "f32" {
            return Err(CheckpointError::UnsupportedDtype {
                name: name.clone(),
                dtype: entry.dtype.clone(),
            });
        }
        if &entry.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: entry.shape.clone(),
            });
        }
        let numel: usize = shape.iter().product();
        if entry.byte_length != 4 * numel as u64 {
            return Err(CheckpointError::LengthMismatch {
                name: name.clone(),
                byte_length: entry.byte_length,
                shape: shape.clone(),
            });
        }
        let start = entry.byte_offset as usize;
        let end = start
            .checked_add(entry.byte_length as usize)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| CheckpointError::Truncated { name: name.clone() })?;
        let data: Vec<T> = payload[start..end]
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let t = Tensor::new(shape.clone(), data).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
        named.insert(name.clone(), t);
    }
    let known: std::collections::HashSet<&String> = expected.iter().map(|(n, _)| n).collect();
    if let Some(extra) = header.tensors.keys().find(|n| !known.contains(n)) {
        return Err(CheckpointError::UnexpectedTensor(extra.clone()));
    }

    let has_w = named.contains_key("classifier.weight");
    let has_b = named.contains_key("classifier.bias");
    match (has_w, has_b) {
        (true, true) => {}
        (false, false) => {
            let head = init_scratch::<T>(&config, MISSING_HEAD_SEED).map_err(|e| CheckpointError::Config(e.to_string()))?;
            named.insert("classifier.weight".into(), head.classifier_weight);
            named.insert("classifier.bias".into(), head.classifier_bias);
        }
        (false, true) => return Err(CheckpointError::MissingTensor("classifier.weight".into())),
        (true, false) => return Err(CheckpointError::MissingTensor("classifier.bias".into())),
    }

    let weights = ModelWeights::from_named(&config, named).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    Ok(Checkpoint {
        weights,
        config,
        records: header.prune_records,
    })
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>, CheckpointError> {
    from_bytes(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    LayerCount,
    MissingTensor,
    Shape,
    NonFinite,
    Config,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub tensor: Option<String>,
    pub message: String,
}

/// Structural and numeric checks; an empty list means the weights are usable
/// with `config`.
pub fn validate<T: Scalar>(weights: &ModelWeights<T>, config: &ModelConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    if let Err(e) = config.validate() {
        out.push(Violation {
            kind: ViolationKind::Config,
            tensor: None,
            message: e.to_string(),
        });
        return out;
    }
    if weights.layers.len() != config.num_layers {
        out.push(Violation {
            kind: ViolationKind::LayerCount,
            tensor: None,
            message: format!(
                "weights have {} encoder layers, config says {}",
                weights.layers.len(),
                config.num_layers
            ),
        });
    }
    let present: BTreeMap<String, &Tensor<T>> = weights.named_tensors().into_iter().collect();
    for (name, shape) in expected_tensors(config) {
        match present.get(&name) {
            None => {
                // Reported once, above, when the whole layer is missing.
                if weights.layers.len() == config.num_layers {
                    out.push(Violation {
                        kind: ViolationKind::MissingTensor,
                        tensor: Some(name.clone()),
                        message: format!("missing tensor {name}"),
                    });
                }
            }
            Some(t) if t.shape() != shape.as_slice() => out.push(Violation {
                kind: ViolationKind::Shape,
                tensor: Some(name.clone()),
                message: format!("{name}: expected {shape:?}, found {:?}", t.shape()),
            }),
            Some(_) => {}
        }
    }
    for (name, t) in &present {
        if !t.is_finite() {
            out.push(Violation {
                kind: ViolationKind::NonFinite,
                tensor: Some(name.clone()),
                message: format!("{name} contains NaN or infinite values"),
            });
        }
    }
    out
}
