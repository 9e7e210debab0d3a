//! Content-addressed on-disk embedding cache.
//!
//! Entry layout: 8-byte magic `EMBCACH1`, u32 little-endian header length,
//! JSON header, then the f32 little-endian payload in C-row-major order. The
//! header's `checksum` is the CRC32 of the payload.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::{Embedding, PreprocParams};
use crate::digest::bytes_digest;
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"EMBCACH1";
pub const CACHE_DTYPE: &str = "f32le";
pub const CACHE_DIR_ENV: &str = "DISTILLSEG_CACHE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub sample_id: String,
    pub encoder_id: String,
    pub shape: [usize; 3],
    pub dtype: String,
    pub checksum: u32,
    pub preproc: PreprocParams,
}

/// Single-writer, many-reader cache rooted at a directory.
#[derive(Debug)]
pub struct EmbeddingCache {
    dir: PathBuf,
    writer: RwLock<()>,
}

impl EmbeddingCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            writer: RwLock::new(()),
        })
    }

    /// Opens the directory named by `DISTILLSEG_CACHE`, if set.
    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Self::open(PathBuf::from(dir)).map(Some),
            _ => Ok(None),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, sample_id: &str, encoder_id: &str) -> PathBuf {
        let key = bytes_digest(format!("{sample_id}\0{encoder_id}").as_bytes());
        self.dir.join(format!("{}.emb", &key[..32]))
    }

    pub fn put(&self, sample_id: &str, embedding: &Embedding) -> Result<()> {
        let bytes = encode_entry(sample_id, embedding)?;
        let path = self.entry_path(sample_id, &embedding.encoder_id);
        let _guard = self.writer.write().unwrap_or_else(|p| p.into_inner());
        let tmp = path.with_extension("emb.tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn get(&self, sample_id: &str, encoder_id: &str) -> Result<Option<Embedding>> {
        let path = self.entry_path(sample_id, encoder_id);
        let _guard = self.writer.read().unwrap_or_else(|p| p.into_inner());
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let (header, embedding) = decode_entry(&bytes).map_err(|reason| Error::CorruptEntry {
            path: path.clone(),
            reason,
        })?;
        if header.sample_id != sample_id || header.encoder_id != encoder_id {
            return Err(Error::CorruptEntry {
                path,
                reason: format!(
                    "entry belongs to ({}, {})",
                    header.sample_id, header.encoder_id
                ),
            });
        }
        Ok(Some(embedding))
    }
}

pub fn encode_entry(sample_id: &str, embedding: &Embedding) -> Result<Vec<u8>> {
    let payload = embedding.payload_bytes();
    let header = CacheHeader {
        sample_id: sample_id.to_string(),
        encoder_id: embedding.encoder_id.clone(),
        shape: embedding.shape(),
        dtype: CACHE_DTYPE.to_string(),
        checksum: crc32fast::hash(&payload),
        preproc: embedding.preproc,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + header_json.len() + payload.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_entry(bytes: &[u8]) -> std::result::Result<(CacheHeader, Embedding), String> {
    if bytes.len() < 12 || &bytes[..8] != CACHE_MAGIC {
        return Err("bad magic".into());
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or("truncated header")?;
    let header: CacheHeader =
        serde_json::from_slice(&bytes[12..header_end]).map_err(|e| format!("header: {e}"))?;
    if header.dtype != CACHE_DTYPE {
        return Err(format!("unsupported dtype {}", header.dtype));
    }
    let payload = &bytes[header_end..];
    let [c, h, w] = header.shape;
    if payload.len() != c * h * w * 4 {
        return Err(format!(
            "payload is {} bytes, shape needs {}",
            payload.len(),
            c * h * w * 4
        ));
    }
    if crc32fast::hash(payload) != header.checksum {
        return Err("checksum mismatch".into());
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let embedding = Embedding::new(c, h, w, values, header.encoder_id.clone(), header.preproc)
        .map_err(|e| e.to_string())?;
    Ok((header, embedding))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_embedding(seed: u64) -> Embedding {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values = (0..4 * 3 * 5).map(|_| rng.random_range(-10.0f32..10.0)).collect();
        Embedding::new(4, 3, 5, values, "enc-a", PreprocParams::new(5, 3, 5).unwrap()).unwrap()
    }

    #[test]
    fn put_get_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        let e = random_embedding(1);
        cache.put("s1", &e).unwrap();
        let back = cache.get("s1", "enc-a").unwrap().unwrap();
        assert_eq!(back.payload_bytes(), e.payload_bytes());
        assert_eq!(back, e);
    }

    #[test]
    fn empty_cache_misses() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        assert!(cache.get("nope", "enc-a").unwrap().is_none());
    }

    #[test]
    fn truncated_entry_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        cache.put("s1", &random_embedding(2)).unwrap();
        let path = cache.entry_path("s1", "enc-a");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(cache.get("s1", "enc-a"), Err(Error::CorruptEntry { .. })));
    }

    #[test]
    fn flipped_payload_bit_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        cache.put("s1", &random_embedding(3)).unwrap();
        let path = cache.entry_path("s1", "enc-a");
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        match cache.get("s1", "enc-a") {
            Err(Error::CorruptEntry { reason, .. }) => assert!(reason.contains("checksum")),
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }

    #[test]
    fn rewriting_is_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        let e = random_embedding(4);
        cache.put("s1", &e).unwrap();
        let first = std::fs::read(cache.entry_path("s1", "enc-a")).unwrap();
        cache.put("s1", &e).unwrap();
        assert_eq!(std::fs::read(cache.entry_path("s1", "enc-a")).unwrap(), first);
        assert_eq!(&first[..8], CACHE_MAGIC);
    }
}
