// Shard files as the harvester writes them, checked against a byte layout
// assembled by hand rather than through the crate's writer.

use crossdiff::store::{read_shard, write_shard, DType, ModelTag, ShardMeta, TokenText};
use crossdiff::Error;
use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn hand_encoded(
    dtype: u8,
    layer: u16,
    d: u32,
    rows: &[Vec<f32>],
    tag: u8,
    corpus_ref: &str,
    tokens: Option<&[(u32, &str)]>,
) -> Vec<u8> {
    let mut block = Vec::new();
    for row in rows {
        for &v in row {
            match dtype {
                0 => block.extend_from_slice(&v.to_le_bytes()),
                _ => block.extend_from_slice(&f16::from_f32(v).to_le_bytes()),
            }
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(b"MNAC");
    out.extend_from_slice(&1u16.to_le_bytes());
    out.push(dtype);
    out.extend_from_slice(&layer.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    out.push(tag);
    out.extend_from_slice(&Sha256::digest(corpus_ref.as_bytes()));
    assert_eq!(out.len(), 54);
    out.extend_from_slice(&block);
    out.extend_from_slice(&(corpus_ref.len() as u32).to_le_bytes());
    out.extend_from_slice(corpus_ref.as_bytes());
    match tokens {
        None => out.push(0),
        Some(tokens) => {
            out.push(1);
            for (seq, text) in tokens {
                out.extend_from_slice(&seq.to_le_bytes());
                out.extend_from_slice(&(text.len() as u32).to_le_bytes());
                out.extend_from_slice(text.as_bytes());
            }
        }
    }
    out.extend_from_slice(&Sha256::digest(&block));
    out
}

#[test]
fn reads_hand_encoded_f32_shard() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.mnac");
    let rows = vec![vec![1.0, -2.5, 3.25], vec![0.0, 1e-3, -7.0]];
    let bytes = hand_encoded(0, 14, 3, &rows, 1, "corpus:x", Some(&[(0, "the"), (0, " cat")]));
    std::fs::write(&path, bytes).unwrap();

    let shard = read_shard(&path).unwrap();
    assert_eq!(shard.n_rows(), 2);
    assert_eq!(shard.d_model(), 3);
    assert_eq!(shard.model_tag(), ModelTag::Finetuned);
    assert_eq!(shard.header().layer_index, 14);
    assert_eq!(shard.corpus_ref(), "corpus:x");
    assert_eq!(shard.row(0), rows[0]);
    assert_eq!(shard.row(1), rows[1]);
    let texts = shard.token_texts().unwrap();
    assert_eq!(texts[1], TokenText { sequence_id: 0, text: " cat".into() });
}

#[test]
fn writer_matches_hand_layout_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.mnac");
    let rows = vec![vec![0.5f32, 1.5], vec![-1.0, 2.0], vec![3.0, 0.25]];
    let meta = ShardMeta {
        model_tag: ModelTag::Base,
        layer_index: 7,
        dtype: DType::F16,
        corpus_ref: "c".into(),
    };
    write_shard(&path, meta, &rows, None).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), hand_encoded(1, 7, 2, &rows, 0, "c", None));
}

#[test]
fn harvester_sized_f16_shard_round_trips() {
    let (n, d) = (4096usize, 2048usize);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // values representable in f16 so the round trip is exact
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| (0..d).map(|_| f16::from_f32(rng.random_range(-8.0f32..8.0)).to_f32()).collect())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.mnac");
    let meta = ShardMeta {
        model_tag: ModelTag::Base,
        layer_index: 14,
        dtype: DType::F16,
        corpus_ref: "harvest:0".into(),
    };
    let written = write_shard(&path, meta, &rows, None).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 54 + (n * d * 2) as u64 + 4 + 9 + 1 + 32);

    let shard = read_shard(&path).unwrap();
    assert_eq!(shard.checksum(), written.checksum());
    for r in [0, 1, 2047, 4095] {
        assert_eq!(shard.row(r), rows[r]);
    }
    let picked = shard.gather(&[4095, 0]);
    assert_eq!(picked.row(0).to_vec(), rows[4095]);
}

#[test]
fn manifest_mirrors_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mnac");
    let meta = ShardMeta {
        model_tag: ModelTag::Finetuned,
        layer_index: 3,
        dtype: DType::F32,
        corpus_ref: "r".into(),
    };
    let shard = write_shard(&path, meta, &vec![vec![1.0f32; 4]; 5], None).unwrap();
    let text = std::fs::read_to_string(dir.path().join("m.mnac.manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["magic"], "MNAC");
    assert_eq!(v["n_rows"], 5);
    assert_eq!(v["d_model"], 4);
    assert_eq!(v["layer_index"], 3);
    assert_eq!(v["checksum"], shard.checksum_hex());
}

#[test]
fn stale_manifest_is_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.mnac");
    let b = dir.path().join("b.mnac");
    let meta = ShardMeta {
        model_tag: ModelTag::Base,
        layer_index: 0,
        dtype: DType::F32,
        corpus_ref: "r".into(),
    };
    write_shard(&a, meta.clone(), &[vec![1.0f32, 2.0]], None).unwrap();
    write_shard(&b, meta, &[vec![3.0f32, 4.0]], None).unwrap();
    std::fs::copy(dir.path().join("b.mnac.manifest.json"), dir.path().join("a.mnac.manifest.json")).unwrap();
    assert!(matches!(read_shard(&a), Err(Error::Corruption(_))));
}

#[test]
fn header_row_count_beyond_file_is_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.mnac");
    let mut bytes = hand_encoded(0, 0, 2, &[vec![1.0, 2.0]], 0, "r", None);
    bytes[13..21].copy_from_slice(&1000u64.to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(read_shard(&path), Err(Error::Corruption(_))));
}

#[test]
fn missing_file_is_io_error() {
    let err = read_shard(std::path::Path::new("/nonexistent/x.mnac")).err().unwrap();
    assert!(matches!(err, Error::Io { .. }));
}
