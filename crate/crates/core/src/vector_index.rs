//! Exact full-scan cosine index over chunk embeddings, with a checksummed
//! binary file format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "RAGIDX01" | u32 dims | u64 count |
//!   count x ( u32 id_len | id bytes | u32 text_len | text bytes | dims x f64 )
//! | u32 crc32(all preceding bytes)
//! ```

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::embedding::EmbeddingVector;

pub const INDEX_MAGIC: &[u8; 8] = b"RAGIDX01";
const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("duplicate chunk id {0:?}")]
    DuplicateId(String),
    #[error("unknown chunk id {0:?}")]
    UnknownId(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic")]
    BadMagic,
    #[error("version mismatch: found {found:?}")]
    VersionMismatch { found: String },
    #[error("truncated index file")]
    Truncated,
    #[error("checksum failure: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("corrupt index file: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub chunk_id: String,
    pub vector: EmbeddingVector,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RetrievalHit {
    pub chunk_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Cosine similarity clamped to `[-1, 1]`; zero if either side has
/// (near-)zero norm.
pub fn cosine_sim(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    if a.dims() != b.dims() {
        return Err(IndexError::DimensionMismatch {
            expected: a.dims(),
            actual: b.dims(),
        });
    }
    Ok(cosine_unchecked(a, b))
}

pub(crate) fn cosine_unchecked(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na < NORM_EPSILON || nb < NORM_EPSILON {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Score descending, then chunk id ascending.
pub(crate) fn hit_order(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dims: usize,
    entries: Vec<IndexEntry>,
    positions: HashMap<String, usize>,
}

impl VectorIndex {
    pub fn new(dims: usize) -> Self {
        Self {
            dims,
            entries: Vec::new(),
            positions: HashMap::new(),
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, chunk_id: &str) -> Option<&IndexEntry> {
        self.positions.get(chunk_id).map(|&i| &self.entries[i])
    }

    pub fn vector(&self, chunk_id: &str) -> Result<&EmbeddingVector, IndexError> {
        self.get(chunk_id)
            .map(|e| &e.vector)
            .ok_or_else(|| IndexError::UnknownId(chunk_id.to_string()))
    }

    pub fn add(&mut self, entry: IndexEntry) -> Result<(), IndexError> {
        if entry.vector.dims() != self.dims {
            return Err(IndexError::DimensionMismatch {
                expected: self.dims,
                actual: entry.vector.dims(),
            });
        }
        if self.positions.contains_key(&entry.chunk_id) {
            return Err(IndexError::DuplicateId(entry.chunk_id));
        }
        self.positions
            .insert(entry.chunk_id.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn search_topk(
        &self,
        q: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<RetrievalHit>, IndexError> {
        self.search_filtered(q, k, |_| true)
    }

    /// Top-k over the entries accepted by `keep`; ranks restart at 1 among
    /// the accepted entries.
    pub fn search_filtered<F>(
        &self,
        q: &EmbeddingVector,
        k: usize,
        keep: F,
    ) -> Result<Vec<RetrievalHit>, IndexError>
    where
        F: Fn(&str) -> bool,
    {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if q.dims() != self.dims {
            return Err(IndexError::DimensionMismatch {
                expected: self.dims,
                actual: q.dims(),
            });
        }
        let mut scored: Vec<(&str, f64)> = self
            .entries
            .iter()
            .filter(|e| keep(&e.chunk_id))
            .map(|e| (e.chunk_id.as_str(), cosine_unchecked(q, &e.vector)))
            .collect();
        let cmp = |a: &(&str, f64), b: &(&str, f64)| hit_order(*a, *b);
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(i, (id, score))| RetrievalHit {
                chunk_id: id.to_string(),
                score,
                rank: i + 1,
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.dims as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.chunk_id.len() as u32).to_le_bytes());
            out.extend_from_slice(e.chunk_id.as_bytes());
            out.extend_from_slice(&(e.text.len() as u32).to_le_bytes());
            out.extend_from_slice(e.text.as_bytes());
            for v in e.vector.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != INDEX_MAGIC {
            if magic.starts_with(b"RAGIDX") {
                return Err(IndexError::VersionMismatch {
                    found: String::from_utf8_lossy(magic).into_owned(),
                });
            }
            return Err(IndexError::BadMagic);
        }
        let dims = cur.u32()? as usize;
        let count = cur.u64()?;
        let mut index = VectorIndex::new(dims);
        for _ in 0..count {
            let id = cur.string()?;
            let text = cur.string()?;
            if bytes.len() - cur.pos < dims.saturating_mul(8) {
                return Err(IndexError::Truncated);
            }
            let mut values = Vec::with_capacity(dims);
            for _ in 0..dims {
                values.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
            }
            let entry = IndexEntry {
                chunk_id: id,
                vector: EmbeddingVector::new(values).with_detected_norm(),
                text,
            };
            index
                .add(entry)
                .map_err(|e| IndexError::Corrupt(e.to_string()))?;
        }
        let body_len = cur.pos;
        let stored = cur.u32()?;
        if cur.pos != bytes.len() {
            return Err(IndexError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        let computed = crc32fast::hash(&bytes[..body_len]);
        if stored != computed {
            return Err(IndexError::Checksum { stored, computed });
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let io_err = |source| IndexError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(&self.to_bytes()).map_err(io_err)?;
        file.sync_all().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = fs::read(path).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).ok_or(IndexError::Truncated)?;
        let slice = self.bytes.get(self.pos..end).ok_or(IndexError::Truncated)?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, IndexError> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| IndexError::Corrupt("invalid utf-8".into()))
    }
}
