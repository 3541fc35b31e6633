//! `CMGW` weight checkpoints: JSON header (config, tensor table, seed,
//! normalization) followed by little-endian f32 values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenoiserWeights, ModelConfig, Normalizer};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::json::to_canonical;
use crate::io::{decode_container, encode_container, f32_payload, f32_values, write_atomic};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CMGW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsHeader {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

/// Encodes weights; the normalizer is stored as two extra tensors.
pub fn weights_to_bytes(w: &DenoiserWeights, seed: u64) -> Result<Vec<u8>> {
    let d = w.norm.dim();
    let mut tensors: Vec<TensorEntry> = vec![
        TensorEntry {
            name: "norm.mean".into(),
            shape: vec![d],
        },
        TensorEntry {
            name: "norm.std".into(),
            shape: vec![d],
        },
    ];
    let mut values: Vec<f32> = w.norm.mean.iter().chain(&w.norm.std).map(|&v| v as f32).collect();
    for (name, t) in w.names().iter().zip(w.tensors()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        });
        values.extend(t.data().iter().map(|&v| v as f32));
    }
    let header = WeightsHeader {
        format_version: WEIGHTS_VERSION,
        config: w.config.clone(),
        seed,
        dtype: "f32le".into(),
        tensors,
    };
    Ok(encode_container(WEIGHTS_MAGIC, &to_canonical(&header)?, &f32_payload(&values)))
}

/// Decodes weights and the seed they were trained with.
pub fn weights_from_bytes(bytes: &[u8]) -> Result<(DenoiserWeights, u64)> {
    let (header, payload) = decode_container(WEIGHTS_MAGIC, bytes)?;
    let header: WeightsHeader =
        serde_json::from_str(header).map_err(|e| Error::Format(format!("weights header: {e}")))?;
    if header.format_version != WEIGHTS_VERSION {
        return Err(Error::UnsupportedVersion(format!(
            "weights format version {}",
            header.format_version
        )));
    }
    if header.dtype != "f32le" {
        return Err(Error::validation(format!("unsupported dtype {:?}", header.dtype)));
    }
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() < total * 4 {
        return Err(Error::TruncatedPayload {
            expected: total * 4,
            actual: payload.len(),
        });
    }
    if payload.len() > total * 4 {
        return Err(Error::validation(format!(
            "payload has {} bytes, tensor table implies {}",
            payload.len(),
            total * 4
        )));
    }
    let values = f32_values(payload);
    let mut offset = 0;
    let mut named = Vec::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let data = values[offset..offset + n].iter().map(|&v| f64::from(v)).collect();
        offset += n;
        named.push((t.name.clone(), Tensor::from_vec(&t.shape, data)));
    }
    let mut it = named.into_iter();
    let norm = match (it.next(), it.next()) {
        (Some((m, mean)), Some((s, std))) if m == "norm.mean" && s == "norm.std" => Normalizer {
            mean: mean.into_data(),
            std: std.into_data(),
        },
        _ => return Err(Error::Format("checkpoint lacks normalization tensors".into())),
    };
    let w = DenoiserWeights::from_tensors(header.config, norm, it.collect())?;
    if !w.is_finite() {
        return Err(Error::validation("checkpoint contains non-finite weights"));
    }
    Ok((w, header.seed))
}

pub fn save_weights(w: &DenoiserWeights, seed: u64, path: &Path) -> Result<()> {
    write_atomic(path, &weights_to_bytes(w, seed)?)
}

pub fn load_weights(path: &Path) -> Result<(DenoiserWeights, u64)> {
    weights_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoiserWeights {
        let cfg = ModelConfig {
            frames: 4,
            joints: 3,
            latent: 4,
            blocks: 1,
            text_dim: 8,
            time_dim: 4,
            ffn_mult: 1,
        };
        DenoiserWeights::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn round_trip_is_f32_exact() {
        let w = tiny();
        let bytes = weights_to_bytes(&w, 42).unwrap();
        let (back, seed) = weights_from_bytes(&bytes).unwrap();
        assert_eq!(seed, 42);
        for (a, b) in w.tensors().iter().zip(back.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // once quantized, a second round trip is lossless
        assert_eq!(weights_to_bytes(&back, 42).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_inputs() {
        let bytes = weights_to_bytes(&tiny(), 1).unwrap();
        assert!(matches!(weights_from_bytes(&bytes[..bytes.len() - 4]), Err(Error::TruncatedPayload { .. })));
        let mut magic = bytes.clone();
        magic[3] = b'X';
        assert!(matches!(weights_from_bytes(&magic), Err(Error::BadMagic { .. })));
    }
}
