//! Paired activation shards.
//!
//! On-disk layout, all integers little-endian:
//!
//! ```text
//! header (54 bytes)
//!   magic        4   "MNAC"
//!   version      u16
//!   dtype        u8   0 = f32, 1 = f16
//!   layer_index  u16
//!   d_model      u32
//!   n_rows       u64
//!   model_tag    u8   0 = base, 1 = finetuned
//!   corpus_hash  32   sha256(corpus_ref)
//! value block        n_rows * d_model * dtype_size, row-major
//! trailer
//!   corpus_ref   u32 length + utf8
//!   has_tokens   u8
//!   tokens       per row: u32 sequence id, u32 length, utf8   (if has_tokens)
//!   checksum     32   sha256(value block)
//! ```
//!
//! A `<file>.manifest.json` sidecar mirrors the header and checksum.

mod batch;
mod shard;

pub use batch::{pair_batches, BatchStream, PairedActivationBatch};
pub(crate) use batch::sequential_batches;
pub use shard::{read_shard, write_shard, ActivationShard, ShardManifest, TokenText};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MNAC";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 54;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F16),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Base,
    Finetuned,
}

impl ModelTag {
    fn code(self) -> u8 {
        match self {
            ModelTag::Base => 0,
            ModelTag::Finetuned => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ModelTag::Base),
            1 => Ok(ModelTag::Finetuned),
            other => Err(Error::Format(format!("unknown model tag {other}"))),
        }
    }
}

/// Metadata supplied when creating a shard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardMeta {
    pub model_tag: ModelTag,
    pub layer_index: u16,
    pub dtype: DType,
    pub corpus_ref: String,
}

/// Fixed-size binary header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u16,
    pub dtype: DType,
    pub layer_index: u16,
    pub d_model: u32,
    pub n_rows: u64,
    pub model_tag: ModelTag,
    pub corpus_hash: [u8; 32],
}

impl ShardHeader {
    pub fn block_len(&self) -> u64 {
        self.n_rows * self.d_model as u64 * self.dtype.size() as u64
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(MAGIC);
        out[4..6].copy_from_slice(&self.version.to_le_bytes());
        out[6] = self.dtype.code();
        out[7..9].copy_from_slice(&self.layer_index.to_le_bytes());
        out[9..13].copy_from_slice(&self.d_model.to_le_bytes());
        out[13..21].copy_from_slice(&self.n_rows.to_le_bytes());
        out[21] = self.model_tag.code();
        out[22..54].copy_from_slice(&self.corpus_hash);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "file too short for header: {} bytes",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let mut corpus_hash = [0u8; 32];
        corpus_hash.copy_from_slice(&bytes[22..54]);
        let header = ShardHeader {
            version,
            dtype: DType::from_code(bytes[6])?,
            layer_index: u16::from_le_bytes([bytes[7], bytes[8]]),
            d_model: u32::from_le_bytes(bytes[9..13].try_into().unwrap()),
            n_rows: u64::from_le_bytes(bytes[13..21].try_into().unwrap()),
            model_tag: ModelTag::from_code(bytes[21])?,
            corpus_hash,
        };
        if header.d_model == 0 {
            return Err(Error::Format("d_model must be positive".into()));
        }
        Ok(header)
    }
}

pub fn corpus_hash(corpus_ref: &str) -> [u8; 32] {
    Sha256::digest(corpus_ref.as_bytes()).into()
}
