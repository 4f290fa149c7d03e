//! Checkpoint container: little-endian binary with magic `ADVZ`, a u32
//! version, a u32 JSON-header length, the JSON header (config, preprocess,
//! tag, parameter names and shapes), then raw f32 parameter blobs in header
//! order. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gradcore::Tensor;

use super::{Classifier, ModelConfig, PreprocessSpec, TrainingTag, ZooError};

const MAGIC: [u8; 4] = *b"ADVZ";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    preprocess: PreprocessSpec,
    tag: Option<TrainingTag>,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(model: &Classifier<f32>, path: impl AsRef<Path>) -> Result<(), ZooError> {
    let header = Header {
        config: model.config.clone(),
        preprocess: model.preprocess,
        tag: model.tag,
        params: model
            .params()
            .iter()
            .map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| ZooError::Format { detail: format!("header encode: {e}") })?;
    let blob_len: usize = model.params().iter().map(|(_, t)| 4 * t.numel()).sum();
    let mut buf = Vec::with_capacity(12 + json.len() + blob_len);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, tensor) in model.params() {
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Classifier<f32>, ZooError> {
    let bytes = fs::read(path)?;
    let fail = |detail: String| ZooError::Format { detail };
    if bytes.len() < 12 {
        return Err(fail(format!("{} bytes is shorter than the fixed header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}, expected ADVZ", &bytes[..4])));
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
    let mut params = Vec::with_capacity(header.params.len());
    for entry in header.params {
        let numel: usize = entry.shape.iter().product();
        let end = offset + 4 * numel;
        let blob = bytes
            .get(offset..end)
            .ok_or_else(|| fail(format!("truncated blob for parameter {}", entry.name)))?;
        let data: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        params.push((entry.name, Tensor::new(entry.shape, data)?));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(fail(format!("{} trailing bytes after parameter blobs", bytes.len() - offset)));
    }
    Classifier::from_parts(header.config, header.preprocess, header.tag, params)
}
