//! Single-file checkpoints.
//!
//! Layout: the 8 magic bytes `CONFORM1`, a little-endian `u64` header length,
//! a JSON header (config, normalization, parameter manifest), then every
//! parameter value as a little-endian `f64` in store order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ConFormerConfig;
use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::model::ConFormer;

const MAGIC: &[u8; 8] = b"CONFORM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ConFormerConfig,
    normalization: NormalizationStats,
    params: Vec<ManifestEntry>,
}

fn manifest(model: &ConFormer) -> Vec<ManifestEntry> {
    model
        .params
        .iter()
        .map(|(_, e)| ManifestEntry {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
        })
        .collect()
}

pub fn encode_checkpoint(model: &ConFormer, stats: &NormalizationStats) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: model.cfg.clone(),
        normalization: stats.clone(),
        params: manifest(model),
    })?;
    let flat = model.params.flatten();
    let mut out = Vec::with_capacity(16 + header.len() + 8 * flat.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ConFormer, NormalizationStats)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut model = ConFormer::new(header.config, 0)?;
    let expected = manifest(&model);
    if expected != header.params {
        let diff = expected
            .iter()
            .zip(&header.params)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("{} {:?} vs {} {:?}", a.name, a.shape, b.name, b.shape))
            .unwrap_or_else(|| format!("{} vs {} tensors", expected.len(), header.params.len()));
        return Err(Error::Checkpoint(format!("parameter manifest mismatch: {diff}")));
    }
    let values = &bytes[16 + len..];
    if values.len() != 8 * model.count_params() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            8 * model.count_params(),
            values.len()
        )));
    }
    let flat: Vec<f64> = values
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    model.params.load_flat(&flat)?;
    Ok((model, header.normalization))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ConFormer, stats: &NormalizationStats) -> Result<()> {
    fs::write(path, encode_checkpoint(model, stats)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ConFormer, NormalizationStats)> {
    decode_checkpoint(&fs::read(path)?)
}
