//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header
//! (model config, adapter config, tensor names and shapes), then every tensor's
//! values as little-endian `f64` in header order. Values are stored bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AgentModel, LoraConfig, LoraLayer, MixingLayer, ModelConfig, ModelError};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RCLACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    lora: LoraConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn named_tensors(model: &AgentModel) -> Vec<(String, &Tensor)> {
    let mut out = vec![("embedding".to_string(), &model.embedding)];
    for (i, layer) in model.layers.iter().enumerate() {
        for (tag, p) in ["q", "k", "v", "o"].iter().zip(layer.projections()) {
            out.push((format!("layers.{i}.{tag}.base"), &p.base));
            out.push((format!("layers.{i}.{tag}.a"), &p.a));
            out.push((format!("layers.{i}.{tag}.b"), &p.b));
        }
    }
    out
}

pub fn to_bytes(model: &AgentModel) -> Vec<u8> {
    let tensors = named_tensors(model);
    let header = Header {
        config: model.config,
        lora: model.lora,
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<AgentModel, ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| ModelError::Checkpoint(e.to_string()))?;

    let mut cursor = 20 + header_len;
    let mut read = |entry: &TensorEntry| -> Result<Tensor, ModelError> {
        let n: usize = entry.shape.iter().product();
        let end = cursor + n * 8;
        let raw = bytes.get(cursor..end).ok_or_else(|| bad("truncated tensor data"))?;
        cursor = end;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(entry.shape.clone(), data)?)
    };

    let mut entries = header.tensors.iter();
    let mut next = |expected: &str| -> Result<Tensor, ModelError> {
        let entry = entries.next().ok_or_else(|| bad("missing tensors"))?;
        if entry.name != expected {
            return Err(ModelError::Checkpoint(format!("expected tensor {expected}, found {}", entry.name)));
        }
        read(entry)
    };

    let embedding = next("embedding")?;
    let mut layers = Vec::with_capacity(header.config.n_layers);
    for i in 0..header.config.n_layers {
        let mut proj = |tag: &str| -> Result<LoraLayer, ModelError> {
            let base = next(&format!("layers.{i}.{tag}.base"))?;
            let a = next(&format!("layers.{i}.{tag}.a"))?;
            let b = next(&format!("layers.{i}.{tag}.b"))?;
            LoraLayer::from_parts(base, a, b, header.lora.alpha, header.lora.dropout)
        };
        layers.push(MixingLayer {
            q: proj("q")?,
            k: proj("k")?,
            v: proj("v")?,
            o: proj("o")?,
        });
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    AgentModel::from_parts(header.config, header.lora, embedding, layers)
}

pub fn save_checkpoint(model: &AgentModel, path: &Path) -> Result<(), ModelError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AgentModel, ModelError> {
    from_bytes(&fs::read(path)?)
}
