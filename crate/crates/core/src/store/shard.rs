use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use half::f16;
use memmap2::Mmap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{corpus_hash, DType, ModelTag, ShardHeader, ShardMeta, FORMAT_VERSION, HEADER_LEN};
use crate::{Error, Result};

/// Text of one token row plus the sequence it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenText {
    pub sequence_id: u32,
    pub text: String,
}

/// JSON sidecar written next to every shard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub magic: String,
    pub version: u16,
    pub dtype: DType,
    pub layer_index: u16,
    pub d_model: u32,
    pub n_rows: u64,
    pub model_tag: ModelTag,
    pub corpus_ref: String,
    pub corpus_hash: String,
    pub has_tokens: bool,
    pub checksum: String,
}

enum Block {
    Mapped(Mmap),
    Owned(Vec<u8>),
}

impl Block {
    fn bytes(&self) -> &[u8] {
        match self {
            Block::Mapped(map) => &map[..],
            Block::Owned(bytes) => bytes,
        }
    }
}

/// A validated activation shard, either memory-mapped from disk or held in memory.
///
/// Rows are decoded on demand, so a mapped shard never materialises its value
/// block unless the caller asks for it.
pub struct ActivationShard {
    header: ShardHeader,
    corpus_ref: String,
    tokens: Option<Vec<TokenText>>,
    checksum: [u8; 32],
    block: Block,
    block_offset: usize,
}

impl std::fmt::Debug for ActivationShard {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ActivationShard")
            .field("header", &self.header)
            .field("corpus_ref", &self.corpus_ref)
            .field("has_tokens", &self.tokens.is_some())
            .finish()
    }
}

fn encode_value(dtype: DType, v: f32, out: &mut Vec<u8>) {
    match dtype {
        DType::F32 => out.extend_from_slice(&v.to_le_bytes()),
        DType::F16 => out.extend_from_slice(&f16::from_f32(v).to_le_bytes()),
    }
}

fn decode_values(dtype: DType, bytes: &[u8], out: &mut [f32]) {
    match dtype {
        DType::F32 => {
            for (dst, chunk) in out.iter_mut().zip(bytes.chunks_exact(4)) {
                *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
        }
        DType::F16 => {
            for (dst, chunk) in out.iter_mut().zip(bytes.chunks_exact(2)) {
                *dst = f16::from_le_bytes([chunk[0], chunk[1]]).to_f32();
            }
        }
    }
}

impl ActivationShard {
    /// Builds an in-memory shard. Rows are encoded with the requested dtype,
    /// so an `F16` shard holds exactly what a reload from disk would give.
    pub fn from_rows<R, I>(meta: ShardMeta, rows: I, tokens: Option<Vec<TokenText>>) -> Result<Self>
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[f32]>,
    {
        let mut d_model: Option<usize> = None;
        let mut n_rows = 0u64;
        let mut bytes = Vec::with_capacity(HEADER_LEN);
        bytes.extend_from_slice(&[0u8; HEADER_LEN]);
        for row in rows {
            let row = row.as_ref();
            match d_model {
                None => {
                    if row.is_empty() {
                        return Err(Error::Format("rows must have d_model > 0".into()));
                    }
                    d_model = Some(row.len());
                }
                Some(d) if d != row.len() => {
                    return Err(Error::Format(format!(
                        "ragged rows: row {n_rows} has length {} but expected {d}",
                        row.len()
                    )));
                }
                Some(_) => {}
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteRow { row: n_rows });
            }
            for &v in row {
                encode_value(meta.dtype, v, &mut bytes);
            }
            n_rows += 1;
        }
        let d_model = d_model.ok_or_else(|| Error::Format("shard needs at least one row".into()))?;
        if let Some(tokens) = &tokens {
            if tokens.len() as u64 != n_rows {
                return Err(Error::Format(format!(
                    "{} token texts for {n_rows} rows",
                    tokens.len()
                )));
            }
        }
        let header = ShardHeader {
            version: FORMAT_VERSION,
            dtype: meta.dtype,
            layer_index: meta.layer_index,
            d_model: u32::try_from(d_model)
                .map_err(|_| Error::Format("d_model exceeds u32".into()))?,
            n_rows,
            model_tag: meta.model_tag,
            corpus_hash: corpus_hash(&meta.corpus_ref),
        };
        bytes[..HEADER_LEN].copy_from_slice(&header.encode());
        let checksum: [u8; 32] = Sha256::digest(&bytes[HEADER_LEN..]).into();
        Ok(ActivationShard {
            header,
            corpus_ref: meta.corpus_ref,
            tokens,
            checksum,
            block: Block::Owned(bytes),
            block_offset: HEADER_LEN,
        })
    }

    /// Convenience constructor from a dense matrix.
    pub fn from_matrix(meta: ShardMeta, rows: &Array2<f32>, tokens: Option<Vec<TokenText>>) -> Result<Self> {
        Self::from_rows(meta, rows.rows().into_iter().map(|r| r.to_vec()), tokens)
    }

    pub fn header(&self) -> &ShardHeader {
        &self.header
    }

    pub fn n_rows(&self) -> usize {
        self.header.n_rows as usize
    }

    pub fn d_model(&self) -> usize {
        self.header.d_model as usize
    }

    pub fn model_tag(&self) -> ModelTag {
        self.header.model_tag
    }

    pub fn corpus_ref(&self) -> &str {
        &self.corpus_ref
    }

    pub fn token_texts(&self) -> Option<&[TokenText]> {
        self.tokens.as_deref()
    }

    pub fn checksum(&self) -> [u8; 32] {
        self.checksum
    }

    pub fn checksum_hex(&self) -> String {
        hex::encode(self.checksum)
    }

    fn row_bytes(&self, row: usize) -> &[u8] {
        let stride = self.d_model() * self.header.dtype.size();
        let start = self.block_offset + row * stride;
        &self.block.bytes()[start..start + stride]
    }

    /// Decodes row `row` into `out` (length `d_model`).
    pub fn read_row_into(&self, row: usize, out: &mut [f32]) {
        assert!(row < self.n_rows(), "row {row} out of range");
        assert_eq!(out.len(), self.d_model());
        decode_values(self.header.dtype, self.row_bytes(row), out);
    }

    pub fn row(&self, row: usize) -> Vec<f32> {
        let mut out = vec![0.0; self.d_model()];
        self.read_row_into(row, &mut out);
        out
    }

    /// Gathers the given rows into a dense `len(rows) x d_model` matrix.
    pub fn gather(&self, rows: &[u64]) -> Array2<f32> {
        let d = self.d_model();
        let mut out = Array2::<f32>::zeros((rows.len(), d));
        for (dst, &r) in out.rows_mut().into_iter().zip(rows) {
            self.read_row_into(r as usize, dst.into_slice().expect("standard layout"));
        }
        out
    }

    /// Decodes the full value block.
    pub fn to_matrix(&self) -> Array2<f32> {
        let rows: Vec<u64> = (0..self.header.n_rows).collect();
        self.gather(&rows)
    }

    /// Checks the pairability invariant; reports the first mismatching field.
    pub fn check_pairable(&self, other: &ActivationShard) -> Result<()> {
        let (a, b) = (&self.header, &other.header);
        let mismatch = |field: &'static str, x: String, y: String| Error::Pairing {
            field,
            base: x,
            ft: y,
        };
        if a.layer_index != b.layer_index {
            return Err(mismatch("layer_index", a.layer_index.to_string(), b.layer_index.to_string()));
        }
        if a.d_model != b.d_model {
            return Err(mismatch("d_model", a.d_model.to_string(), b.d_model.to_string()));
        }
        if a.n_rows != b.n_rows {
            return Err(mismatch("n_rows", a.n_rows.to_string(), b.n_rows.to_string()));
        }
        if a.corpus_hash != b.corpus_hash {
            return Err(mismatch("corpus_ref", self.corpus_ref.clone(), other.corpus_ref.clone()));
        }
        Ok(())
    }

    pub fn manifest(&self) -> ShardManifest {
        ShardManifest {
            magic: "MNAC".into(),
            version: self.header.version,
            dtype: self.header.dtype,
            layer_index: self.header.layer_index,
            d_model: self.header.d_model,
            n_rows: self.header.n_rows,
            model_tag: self.header.model_tag,
            corpus_ref: self.corpus_ref.clone(),
            corpus_hash: hex::encode(self.header.corpus_hash),
            has_tokens: self.tokens.is_some(),
            checksum: self.checksum_hex(),
        }
    }

    /// Writes the shard file and its manifest sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let file = File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.header.encode()).map_err(io)?;
        let block_len = self.header.block_len() as usize;
        w.write_all(&self.block.bytes()[self.block_offset..self.block_offset + block_len])
            .map_err(io)?;
        w.write_all(&encode_trailer(&self.corpus_ref, self.tokens.as_deref(), &self.checksum))
            .map_err(io)?;
        w.flush().map_err(io)?;
        drop(w);

        let manifest_path = manifest_path(path);
        let text = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        std::fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
        Ok(())
    }
}

fn encode_trailer(corpus_ref: &str, tokens: Option<&[TokenText]>, checksum: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(corpus_ref.len() as u32).to_le_bytes());
    out.extend_from_slice(corpus_ref.as_bytes());
    match tokens {
        None => out.push(0),
        Some(tokens) => {
            out.push(1);
            for t in tokens {
                out.extend_from_slice(&t.sequence_id.to_le_bytes());
                out.extend_from_slice(&(t.text.len() as u32).to_le_bytes());
                out.extend_from_slice(t.text.as_bytes());
            }
        }
    }
    out.extend_from_slice(checksum);
    out
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Writes rows plus metadata to `path` and returns the in-memory shard.
pub fn write_shard<R, I>(
    path: &Path,
    meta: ShardMeta,
    rows: I,
    tokens: Option<Vec<TokenText>>,
) -> Result<ActivationShard>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f32]>,
{
    let shard = ActivationShard::from_rows(meta, rows, tokens)?;
    shard.write(path)?;
    Ok(shard)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corruption("trailer truncated".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode_trailer(bytes: &[u8], n_rows: u64) -> Result<(String, Option<Vec<TokenText>>, [u8; 32])> {
    let mut cur = Cursor { bytes, pos: 0 };
    let len = cur.u32()? as usize;
    let corpus_ref = String::from_utf8(cur.take(len)?.to_vec())
        .map_err(|_| Error::Corruption("corpus_ref is not utf8".into()))?;
    let tokens = match cur.take(1)?[0] {
        0 => None,
        1 => {
            let mut tokens = Vec::with_capacity(n_rows as usize);
            for _ in 0..n_rows {
                let sequence_id = cur.u32()?;
                let len = cur.u32()? as usize;
                let text = String::from_utf8(cur.take(len)?.to_vec())
                    .map_err(|_| Error::Corruption("token text is not utf8".into()))?;
                tokens.push(TokenText { sequence_id, text });
            }
            Some(tokens)
        }
        other => return Err(Error::Corruption(format!("bad token flag {other}"))),
    };
    let mut checksum = [0u8; 32];
    checksum.copy_from_slice(cur.take(32)?);
    if cur.pos != bytes.len() {
        return Err(Error::Corruption(format!(
            "{} unexpected bytes after trailer",
            bytes.len() - cur.pos
        )));
    }
    Ok((corpus_ref, tokens, checksum))
}

/// Opens and fully validates a shard: header, length arithmetic, trailer,
/// checksum, manifest agreement (when a sidecar exists) and row finiteness.
/// The value block stays memory-mapped.
pub fn read_shard(path: &Path) -> Result<ActivationShard> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    // SAFETY: the map is read-only; shards are not modified while open.
    let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
    let header = ShardHeader::decode(&map)?;
    let block_end = HEADER_LEN as u64 + header.block_len();
    if (map.len() as u64) < block_end + 4 + 1 + 32 {
        return Err(Error::Corruption(format!(
            "{}: header claims {} rows of d_model {} but file holds {} bytes",
            path.display(),
            header.n_rows,
            header.d_model,
            map.len()
        )));
    }
    let block_end = block_end as usize;
    let (corpus_ref, tokens, checksum) = decode_trailer(&map[block_end..], header.n_rows)?;
    if corpus_hash(&corpus_ref) != header.corpus_hash {
        return Err(Error::Corruption("corpus hash does not match corpus_ref".into()));
    }

    let block = &map[HEADER_LEN..block_end];
    let actual: [u8; 32] = Sha256::digest(block).into();
    if actual != checksum {
        return Err(Error::Corruption(format!(
            "{}: checksum mismatch (stored {}, computed {})",
            path.display(),
            hex::encode(checksum),
            hex::encode(actual)
        )));
    }

    let mpath = manifest_path(path);
    if mpath.exists() {
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: ShardManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
        if manifest.checksum != hex::encode(checksum) || manifest.n_rows != header.n_rows {
            return Err(Error::Corruption(format!(
                "{} disagrees with shard contents",
                mpath.display()
            )));
        }
    }

    let d = header.d_model as usize;
    let stride = d * header.dtype.size();
    let mut buf = vec![0f32; d];
    for (row, bytes) in block.chunks_exact(stride).enumerate() {
        decode_values(header.dtype, bytes, &mut buf);
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteRow { row: row as u64 });
        }
    }

    Ok(ActivationShard {
        header,
        corpus_ref,
        tokens,
        checksum,
        block: Block::Mapped(map),
        block_offset: HEADER_LEN,
    })
}
