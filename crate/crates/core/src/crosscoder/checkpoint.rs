//! Checkpoint layout, little-endian:
//!
//! ```text
//! magic "MNCK" | version u16 | d u32 | m u32 | k u32 | expansion u32
//! has_threshold u8 | threshold f64 | has_norm u8 | scale_base f64 | scale_ft f64
//! seed u64
//! w_enc, b_enc, dec_base, dec_ft, bias_base, bias_ft   (f32 blocks)
//! sha256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{CrossCoder, NormalizationStats, Params};
use crate::{Error, Real, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MNCK";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 * 4 + 1 + 8 + 1 + 8 + 8 + 8;

pub fn encode_checkpoint<T: Real>(model: &CrossCoder<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [model.d(), model.m(), model.k, model.expansion] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(model.threshold.is_some() as u8);
    out.extend_from_slice(&model.threshold.unwrap_or(0.0).to_le_bytes());
    out.push(model.norm.is_some() as u8);
    let norm = model.norm.unwrap_or(NormalizationStats {
        scale_base: 1.0,
        scale_ft: 1.0,
    });
    out.extend_from_slice(&norm.scale_base.to_le_bytes());
    out.extend_from_slice(&norm.scale_ft.to_le_bytes());
    out.extend_from_slice(&model.seed.to_le_bytes());
    for block in model.params.slices() {
        for v in block {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    out
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<CrossCoder<T>> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < HEADER_LEN + 32 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic or too short)"));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(bad("checksum mismatch (truncated or corrupt)"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(body[o..o + 8].try_into().unwrap());
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let (d, m, k, expansion) = (u32_at(6), u32_at(10), u32_at(14), u32_at(18));
    let threshold = (body[22] == 1).then(|| f64_at(23));
    let norm = (body[31] == 1).then(|| NormalizationStats {
        scale_base: f64_at(32),
        scale_ft: f64_at(40),
    });
    let seed = u64::from_le_bytes(body[48..56].try_into().unwrap());
    if d == 0 || m == 0 || k == 0 || k > m {
        return Err(bad("invalid dimensions"));
    }
    let n_values = 2 * d * m + m + 2 * m * d + 2 * d;
    if body.len() != HEADER_LEN + 4 * n_values {
        return Err(bad(&format!(
            "expected {} parameter bytes, found {}",
            4 * n_values,
            body.len().saturating_sub(HEADER_LEN)
        )));
    }
    let mut params = Params::<T>::zeros(d, m);
    let mut pos = HEADER_LEN;
    for block in params.slices_mut() {
        for v in block.iter_mut() {
            let x = f32::from_le_bytes(body[pos..pos + 4].try_into().unwrap());
            if !x.is_finite() {
                return Err(bad("non-finite parameter"));
            }
            *v = T::from_f64_lossy(x as f64);
            pos += 4;
        }
    }
    Ok(CrossCoder {
        params,
        k,
        expansion,
        threshold,
        norm,
        seed,
    })
}

pub fn save_checkpoint<T: Real>(model: &CrossCoder<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<CrossCoder<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
