//! Adversarial-set persistence: a binary container (magic `ADVI`, u32
//! version, u32 header length, JSON header, then f32 image blobs per epsilon
//! slice) plus a human-readable JSON manifest written alongside it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::gradcore::Tensor;

use super::{AttackError, AttackOutput, AttackSpec, EpsilonSlice};

const MAGIC: [u8; 4] = *b"ADVI";
const VERSION: u32 = 1;

/// A persisted attack run: who generated it, with what spec and seed,
/// against which labels, and the per-epsilon adversarial batches.
#[derive(Debug, Clone)]
pub struct AdversarialSet {
    /// Identifier of the surrogate that generated the images.
    pub surrogate: String,
    pub seed: u64,
    pub spec: AttackSpec,
    pub labels: Vec<usize>,
    pub output: AttackOutput<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    surrogate: String,
    seed: u64,
    spec: AttackSpec,
    labels: Vec<usize>,
    diagnostics: Vec<String>,
    slices: Vec<SliceEntry>,
}

#[derive(Serialize, Deserialize)]
struct SliceEntry {
    epsilon: f64,
    shape: Vec<usize>,
    success: Vec<bool>,
    linf: Vec<f64>,
}

/// Writes `{base}.advi` (binary) and `{base}.json` (manifest); returns both
/// paths. Identical sets serialize to identical bytes.
pub fn save_adversarial_set(
    set: &AdversarialSet,
    base: impl AsRef<Path>,
) -> Result<(PathBuf, PathBuf), AttackError> {
    let header = Header {
        surrogate: set.surrogate.clone(),
        seed: set.seed,
        spec: set.spec.clone(),
        labels: set.labels.clone(),
        diagnostics: set.output.diagnostics.clone(),
        slices: set
            .output
            .per_epsilon
            .iter()
            .map(|s| SliceEntry {
                epsilon: s.epsilon,
                shape: s.images.shape().to_vec(),
                success: s.success.clone(),
                linf: s.linf.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| AttackError::Format { detail: format!("header encode: {e}") })?;
    let blob_len: usize =
        set.output.per_epsilon.iter().map(|s| 4 * s.images.numel()).sum();
    let mut buf = Vec::with_capacity(12 + json.len() + blob_len);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for slice in &set.output.per_epsilon {
        for v in slice.images.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let base = base.as_ref();
    let bin_path = base.with_extension("advi");
    let json_path = base.with_extension("json");
    fs::write(&bin_path, buf)?;
    fs::write(&json_path, manifest_bytes(set)?)?;
    Ok((bin_path, json_path))
}

/// The stand-alone manifest: surrogate id, spec, seed, and per-image
/// ∞-distances with success summaries per epsilon.
fn manifest_bytes(set: &AdversarialSet) -> Result<Vec<u8>, AttackError> {
    let per_epsilon: Vec<serde_json::Value> = set
        .output
        .per_epsilon
        .iter()
        .map(|s| {
            let n = s.success.len().max(1);
            json!({
                "epsilon": s.epsilon,
                "images": s.success.len(),
                "success_rate": s.success.iter().filter(|&&b| b).count() as f64 / n as f64,
                "max_linf": s.linf.iter().copied().fold(0.0f64, f64::max),
                "linf": s.linf,
                "success": s.success,
            })
        })
        .collect();
    let manifest = json!({
        "surrogate": set.surrogate,
        "seed": set.seed,
        "spec": set.spec,
        "labels": set.labels,
        "diagnostics": set.output.diagnostics,
        "per_epsilon": per_epsilon,
    });
    let mut bytes = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| AttackError::Format { detail: format!("manifest encode: {e}") })?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Reads a `.advi` container back into memory.
pub fn load_adversarial_set(path: impl AsRef<Path>) -> Result<AdversarialSet, AttackError> {
    let bytes = fs::read(path)?;
    let fail = |detail: String| AttackError::Format { detail };
    if bytes.len() < 12 {
        return Err(fail(format!("{} bytes is shorter than the fixed header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}, expected ADVI", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("slice of 4"));
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}, expected {VERSION}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("slice of 4")) as usize;
    let body = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| fail("truncated JSON header".to_string()))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| fail(format!("header decode: {e}")))?;

    let mut offset = 12 + header_len;
    let mut per_epsilon = Vec::with_capacity(header.slices.len());
    for entry in header.slices {
        if entry.shape.len() != 4 {
            return Err(fail(format!("slice shape {:?} is not [n,h,w,c]", entry.shape)));
        }
        let n = entry.shape[0];
        if entry.success.len() != n || entry.linf.len() != n {
            return Err(fail(format!(
                "slice at epsilon {} declares {n} images but carries {} flags / {} distances",
                entry.epsilon,
                entry.success.len(),
                entry.linf.len()
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let end = offset + 4 * numel;
        let blob = bytes
            .get(offset..end)
            .ok_or_else(|| fail(format!("truncated blob at epsilon {}", entry.epsilon)))?;
        let data: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        per_epsilon.push(EpsilonSlice {
            epsilon: entry.epsilon,
            images: Tensor::new(entry.shape, data)
                .map_err(|e| fail(format!("slice tensor: {e}")))?,
            success: entry.success,
            linf: entry.linf,
        });
        offset = end;
    }
    if per_epsilon.is_empty() {
        return Err(fail("set carries no epsilon slices".to_string()));
    }
    if offset != bytes.len() {
        return Err(fail(format!("{} trailing bytes after image blobs", bytes.len() - offset)));
    }
    Ok(AdversarialSet {
        surrogate: header.surrogate,
        seed: header.seed,
        spec: header.spec,
        labels: header.labels,
        output: AttackOutput { per_epsilon, diagnostics: header.diagnostics },
    })
}
