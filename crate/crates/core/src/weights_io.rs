//! On-disk model format: `manifest.json` beside a raw little-endian `weights.bin`.
//!
//! The manifest carries the model configuration, one record per tensor
//! (`embedding`, then `layers.<i>.<tensor>`), and the 64-bit FNV-1a checksum
//! of the blob. See `docs/FORMAT.md` for the field reference.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::model::{LayerWeights, Model, ModelConfig};
use crate::numerics::Matrix;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

/// Layer tensor suffixes, in blob order.
pub const LAYER_TENSORS: [&str; 9] =
    ["w_q", "w_k", "w_v", "w_o", "attn_norm", "mlp_norm", "w_gate", "w_up", "w_down"];

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FormatError {
    #[error("blob checksum {found} does not match manifest {expected}")]
    ChecksumMismatch { expected: String, found: String },
    #[error("tensor {name} has shape {found:?}, config requires {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("tensor {name} has unknown dtype {dtype:?}")]
    UnknownDtype { name: String, dtype: String },
    #[error("tensor {0} is missing from the manifest")]
    MissingTensor(String),
    #[error("tensor {0} is listed more than once")]
    DuplicateTensor(String),
    #[error("tensor {name} byte range is invalid: {reason}")]
    BadRange { name: String, reason: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("tensor {0} contains non-finite values")]
    NonFinite(String),
}

impl FormatError {
    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::ChecksumMismatch { .. } => "checksum_mismatch",
            FormatError::ShapeMismatch { .. } => "shape_mismatch",
            FormatError::UnknownDtype { .. } => "unknown_dtype",
            FormatError::MissingTensor(_) => "missing_tensor",
            FormatError::DuplicateTensor(_) => "duplicate_tensor",
            FormatError::BadRange { .. } => "bad_range",
            FormatError::UnsupportedVersion(_) => "unsupported_version",
            FormatError::Manifest(_) => "malformed_manifest",
            FormatError::NonFinite(_) => "non_finite",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Kept as text so an unknown dtype is reported as such rather than as a parse error.
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecord>,
    /// FNV-1a 64 of `weights.bin`, as 16 lowercase hex digits.
    pub blob_checksum: String,
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

fn checksum_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

/// `(name, expected shape)` for every tensor the config requires, in blob order.
pub fn expected_tensors(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, p) = (cfg.hidden_size, cfg.mlp_size);
    let mut out = vec![("embedding".to_string(), vec![cfg.vocab_size, d])];
    for l in 0..cfg.num_layers {
        for t in LAYER_TENSORS {
            let shape = match t {
                "attn_norm" | "mlp_norm" => vec![d],
                "w_gate" | "w_up" => vec![d, p],
                "w_down" => vec![p, d],
                _ => vec![d, d],
            };
            out.push((format!("layers.{l}.{t}"), shape));
        }
    }
    out
}

fn model_tensors(model: &Model) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = vec![model.embedding.as_slice()];
    for w in &model.layers {
        out.extend([
            w.w_q.as_slice(),
            w.w_k.as_slice(),
            w.w_v.as_slice(),
            w.w_o.as_slice(),
            w.attn_norm.as_slice(),
            w.mlp_norm.as_slice(),
            w.w_gate.as_slice(),
            w.w_up.as_slice(),
            w.w_down.as_slice(),
        ]);
    }
    out
}

/// Writes `manifest.json` and `weights.bin` into `dir`, creating it if needed.
pub fn save_model(model: &Model, dir: &Path, dtype: Dtype) -> Result<Manifest> {
    model.validate()?;
    let mut blob = Vec::new();
    let mut records = Vec::new();
    for ((name, shape), data) in expected_tensors(&model.config).into_iter().zip(model_tensors(model)) {
        let offset = blob.len() as u64;
        match dtype {
            Dtype::F32 => data.iter().for_each(|v| blob.extend_from_slice(&(*v as f32).to_le_bytes())),
            Dtype::F64 => data.iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes())),
        }
        records.push(TensorRecord {
            name,
            shape,
            dtype: dtype.as_str().to_string(),
            byte_offset: offset,
            byte_length: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        tensors: records,
        blob_checksum: checksum_hex(&blob),
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join(BLOB_FILE), &blob)?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(|e| FormatError::Manifest(e.to_string()).into())
}

/// Outcome of [`validate_manifest`]; empty `issues` means the directory is loadable.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub manifest: Option<Manifest>,
    pub blob_len: u64,
    pub issues: Vec<FormatError>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Structural checks of a model directory. Hashes the blob but decodes no tensors.
pub fn validate_manifest(dir: &Path) -> Result<ValidationReport> {
    let manifest = match read_manifest(dir) {
        Ok(m) => m,
        Err(Error::Format(e)) => {
            return Ok(ValidationReport { manifest: None, blob_len: 0, issues: vec![e] })
        }
        Err(e) => return Err(e),
    };
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let issues = check_manifest(&manifest, &blob);
    Ok(ValidationReport { manifest: Some(manifest), blob_len: blob.len() as u64, issues })
}

fn check_manifest(m: &Manifest, blob: &[u8]) -> Vec<FormatError> {
    let mut issues = Vec::new();
    if m.format_version != FORMAT_VERSION {
        issues.push(FormatError::UnsupportedVersion(m.format_version));
    }
    if let Err(e) = m.config.validate() {
        issues.push(FormatError::Manifest(e.to_string()));
    }
    let found = checksum_hex(blob);
    if found != m.blob_checksum {
        issues.push(FormatError::ChecksumMismatch { expected: m.blob_checksum.clone(), found });
    }

    let mut seen = HashSet::new();
    for r in &m.tensors {
        if !seen.insert(r.name.as_str()) {
            issues.push(FormatError::DuplicateTensor(r.name.clone()));
        }
    }
    let mut ranges = Vec::new();
    for (name, shape) in expected_tensors(&m.config) {
        let Some(r) = m.tensors.iter().find(|r| r.name == name) else {
            issues.push(FormatError::MissingTensor(name));
            continue;
        };
        if r.shape != shape {
            issues.push(FormatError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: r.shape.clone(),
            });
        }
        let Some(dtype) = Dtype::parse(&r.dtype) else {
            issues.push(FormatError::UnknownDtype { name, dtype: r.dtype.clone() });
            continue;
        };
        let want = (r.shape.iter().product::<usize>() * dtype.size()) as u64;
        let end = r.byte_offset.checked_add(r.byte_length);
        if r.byte_length != want {
            issues.push(FormatError::BadRange {
                name,
                reason: format!("length {} but shape and dtype need {want}", r.byte_length),
            });
        } else if end.is_none_or(|e| e > blob.len() as u64) {
            issues.push(FormatError::BadRange {
                name,
                reason: format!("extends past the {}-byte blob", blob.len()),
            });
        } else {
            ranges.push((r.byte_offset, r.byte_offset + r.byte_length, name));
        }
    }
    ranges.sort();
    for w in ranges.windows(2) {
        if w[1].0 < w[0].1 {
            issues.push(FormatError::BadRange {
                name: w[1].2.clone(),
                reason: format!("overlaps {}", w[0].2),
            });
        }
    }
    for r in &m.tensors {
        if !r.name.starts_with("layers.") && r.name != "embedding" {
            issues.push(FormatError::Manifest(format!("unexpected tensor {}", r.name)));
        }
    }
    issues
}

fn decode(blob: &[u8], r: &TensorRecord) -> Result<Vec<f64>> {
    let dtype = Dtype::parse(&r.dtype)
        .ok_or_else(|| FormatError::UnknownDtype { name: r.name.clone(), dtype: r.dtype.clone() })?;
    let bytes = &blob[r.byte_offset as usize..(r.byte_offset + r.byte_length) as usize];
    let values: Vec<f64> = match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite(r.name.clone()).into());
    }
    Ok(values)
}

/// Loads a model directory, upconverting to `f64`.
///
/// Fails with the first structural issue found (checksum first), so a corrupted
/// blob is always reported as a checksum mismatch.
pub fn load_model(dir: &Path) -> Result<Model> {
    let manifest = read_manifest(dir)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    if let Some(issue) = check_manifest(&manifest, &blob).into_iter().next() {
        return Err(issue.into());
    }
    let cfg = manifest.config.clone();
    let find = |name: &str| manifest.tensors.iter().find(|r| r.name == name).expect("checked");
    let matrix = |name: &str| -> Result<Matrix> {
        let r = find(name);
        let data = decode(&blob, r)?;
        let (rows, cols) = (r.shape[0], r.shape.get(1).copied().unwrap_or(1));
        Matrix::from_vec(rows, cols, data)
    };
    let vector = |name: &str| decode(&blob, find(name));
    let embedding = matrix("embedding")?;
    let layers = (0..cfg.num_layers)
        .map(|l| {
            let n = |t: &str| format!("layers.{l}.{t}");
            Ok(LayerWeights {
                w_q: matrix(&n("w_q"))?,
                w_k: matrix(&n("w_k"))?,
                w_v: matrix(&n("w_v"))?,
                w_o: matrix(&n("w_o"))?,
                attn_norm: vector(&n("attn_norm"))?,
                mlp_norm: vector(&n("mlp_norm"))?,
                w_gate: matrix(&n("w_gate"))?,
                w_up: matrix(&n("w_up"))?,
                w_down: matrix(&n("w_down"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = Model { config: cfg, embedding, layers };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_model;

    fn model() -> Model {
        generate_model(&ModelConfig::new(8, 12, 2, 16), 1).unwrap()
    }

    fn format_err(e: Error) -> FormatError {
        match e {
            Error::Format(f) => f,
            other => panic!("expected a format error, got {other}"),
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save_model(&m, dir.path(), Dtype::F64).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back, m);
        assert!(validate_manifest(dir.path()).unwrap().is_valid());
    }

    #[test]
    fn f32_round_trip_is_exact_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save_model(&m, dir.path(), Dtype::F32).unwrap();
        let back = load_model(dir.path()).unwrap();
        for (a, b) in back.embedding.as_slice().iter().zip(m.embedding.as_slice()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        // Saving the reloaded model at f32 reproduces the blob byte for byte.
        let dir2 = tempfile::tempdir().unwrap();
        save_model(&back, dir2.path(), Dtype::F32).unwrap();
        assert_eq!(
            fs::read(dir.path().join(BLOB_FILE)).unwrap(),
            fs::read(dir2.path().join(BLOB_FILE)).unwrap()
        );
    }

    #[test]
    fn truncated_blob_is_a_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&model(), dir.path(), Dtype::F64).unwrap();
        let path = dir.path().join(BLOB_FILE);
        let mut blob = fs::read(&path).unwrap();
        blob.pop();
        fs::write(&path, blob).unwrap();
        let err = format_err(load_model(dir.path()).unwrap_err());
        assert_eq!(err.code(), "checksum_mismatch");
        let report = validate_manifest(dir.path()).unwrap();
        assert!(report.issues.iter().any(|i| i.code() == "checksum_mismatch"));
        assert!(report.issues.iter().any(|i| i.code() == "bad_range"));
    }

    fn edit_manifest(dir: &Path, f: impl FnOnce(&mut Manifest)) {
        let mut m = read_manifest(dir).unwrap();
        f(&mut m);
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
    }

    #[test]
    fn distinct_error_codes() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&model(), dir.path(), Dtype::F64).unwrap();

        edit_manifest(dir.path(), |m| m.tensors[3].dtype = "bf16".into());
        let err = format_err(load_model(dir.path()).unwrap_err());
        assert_eq!(err.code(), "unknown_dtype");

        save_model(&model(), dir.path(), Dtype::F64).unwrap();
        edit_manifest(dir.path(), |m| m.tensors[1].shape = vec![4, 16]);
        assert_eq!(format_err(load_model(dir.path()).unwrap_err()).code(), "shape_mismatch");

        save_model(&model(), dir.path(), Dtype::F64).unwrap();
        edit_manifest(dir.path(), |m| {
            m.tensors.retain(|r| r.name != "layers.1.w_o");
        });
        let err = format_err(load_model(dir.path()).unwrap_err());
        assert_eq!(err, FormatError::MissingTensor("layers.1.w_o".into()));

        fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
        assert_eq!(format_err(load_model(dir.path()).unwrap_err()).code(), "malformed_manifest");
    }

    #[test]
    fn manifest_is_standalone_json() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&model(), dir.path(), Dtype::F32).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["format_version"], 1);
        assert_eq!(v["tensors"][0]["name"], "embedding");
        assert_eq!(v["tensors"][1]["name"], "layers.0.w_q");
        assert_eq!(v["tensors"].as_array().unwrap().len(), 1 + 2 * 9);
    }
}
