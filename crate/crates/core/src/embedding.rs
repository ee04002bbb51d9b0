//! Dense unit-norm embeddings for queries and chunks.
//!
//! Two embedders share one contract: a deterministic signed-hash bag of
//! tokens ([`embed_hashed`]) and a trainable linear projection of hashed
//! token counts ([`ProjectionEmbedder`]).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::corpus::TokenSequence;

pub const EMBEDDER_MAGIC: &[u8; 8] = b"RAGEMB01";
const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EmbedderFileError {
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
    #[error("truncated embedder file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("embedder file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid embedder shape {dims}x{vocab_buckets}")]
    InvalidShape { dims: usize, vocab_buckets: usize },
    #[error("embedder weight {0} is not finite")]
    NonFinite(usize),
}

/// A dense vector plus a flag recording whether it was unit-normalized.
///
/// Degenerate inputs (no tokens, zero projection) yield the zero vector with
/// `normalized == false`; it has similarity 0 against everything.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn zeros(dims: usize) -> Self {
        Self::new(vec![0.0; dims])
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Marks the vector normalized if its norm is within 1e-6 of one.
    pub(crate) fn with_detected_norm(mut self) -> Self {
        self.normalized = (self.norm() - 1.0).abs() <= 1e-6;
        self
    }
}

/// `v / ‖v‖`, or the flagged zero vector when `‖v‖ <= 1e-12`.
pub fn normalize(v: &EmbeddingVector) -> EmbeddingVector {
    let norm = v.norm();
    if norm <= NORM_EPSILON || !norm.is_finite() {
        return EmbeddingVector::zeros(v.dims());
    }
    EmbeddingVector {
        values: v.values.iter().map(|x| x / norm).collect(),
        normalized: true,
    }
}

fn mix64(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sign assigned to a token by the hashed embedder: bit 63 of the
/// seed-mixed token ID selects `-1`.
pub fn hashed_sign(token_id: u64, seed: u64) -> f64 {
    if mix64(token_id ^ seed) >> 63 == 1 {
        -1.0
    } else {
        1.0
    }
}

/// Signed bag-of-tokens embedding: each token adds ±1 at `id mod dims`.
pub fn embed_hashed(tokens: &TokenSequence, dims: usize, seed: u64) -> EmbeddingVector {
    assert!(dims >= 1, "embedding dims must be at least 1");
    let mut values = vec![0.0; dims];
    for &id in tokens.ids() {
        values[(id % dims as u64) as usize] += hashed_sign(id, seed);
    }
    normalize(&EmbeddingVector::new(values))
}

/// Hashed token counts: `b[id mod buckets] += 1`.
pub fn bucket_counts(tokens: &TokenSequence, buckets: usize) -> Vec<(usize, f64)> {
    let mut counts: Vec<(usize, f64)> = Vec::new();
    for &id in tokens.ids() {
        let bucket = (id % buckets as u64) as usize;
        match counts.iter_mut().find(|(b, _)| *b == bucket) {
            Some((_, c)) => *c += 1.0,
            None => counts.push((bucket, 1.0)),
        }
    }
    counts.sort_by_key(|(b, _)| *b);
    counts
}

/// Linear projection `W` (`dims x vocab_buckets`, row-major) applied to
/// hashed token counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionEmbedder {
    dims: usize,
    vocab_buckets: usize,
    weights: Vec<f64>,
    seed: u64,
}

impl ProjectionEmbedder {
    pub fn from_weights(
        dims: usize,
        vocab_buckets: usize,
        weights: Vec<f64>,
        seed: u64,
    ) -> Result<Self, EmbedderFileError> {
        if dims == 0 || vocab_buckets == 0 || weights.len() != dims * vocab_buckets {
            return Err(EmbedderFileError::InvalidShape {
                dims,
                vocab_buckets,
            });
        }
        if let Some(pos) = weights.iter().position(|w| !w.is_finite()) {
            return Err(EmbedderFileError::NonFinite(pos));
        }
        Ok(Self {
            dims,
            vocab_buckets,
            weights,
            seed,
        })
    }

    /// Gaussian initialization with standard deviation `1/sqrt(dims)`, so
    /// each column has roughly unit norm.
    pub fn random(dims: usize, vocab_buckets: usize, seed: u64) -> Self {
        assert!(
            dims >= 1 && vocab_buckets >= 1,
            "embedder shape must be non-zero"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (dims as f64).sqrt()).expect("valid std");
        let weights = (0..dims * vocab_buckets)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self {
            dims,
            vocab_buckets,
            weights,
            seed,
        }
    }

    pub fn identity(dims: usize) -> Self {
        let mut weights = vec![0.0; dims * dims];
        for i in 0..dims {
            weights[i * dims + i] = 1.0;
        }
        Self {
            dims,
            vocab_buckets: dims,
            weights,
            seed: 0,
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn vocab_buckets(&self) -> usize {
        self.vocab_buckets
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.vocab_buckets + col]
    }

    /// Unnormalized projection `W·b` for sparse counts `b`.
    pub fn project_counts(&self, counts: &[(usize, f64)]) -> Vec<f64> {
        let mut out = vec![0.0; self.dims];
        for (row, slot) in out.iter_mut().enumerate() {
            let base = row * self.vocab_buckets;
            *slot = counts
                .iter()
                .map(|&(col, c)| self.weights[base + col] * c)
                .sum();
        }
        out
    }

    pub fn embed(&self, tokens: &TokenSequence) -> EmbeddingVector {
        embed_projected(tokens, self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.weights.len() * 8);
        out.extend_from_slice(EMBEDDER_MAGIC);
        out.extend_from_slice(&(self.dims as u32).to_le_bytes());
        out.extend_from_slice(&(self.vocab_buckets as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbedderFileError> {
        const HEADER: usize = 8 + 4 + 4 + 8;
        if bytes.len() < 8 {
            return Err(EmbedderFileError::Truncated {
                expected: HEADER,
                found: bytes.len(),
            });
        }
        let magic = &bytes[..8];
        if magic != EMBEDDER_MAGIC {
            if magic.starts_with(b"RAGEMB") {
                return Err(EmbedderFileError::VersionMismatch {
                    found: String::from_utf8_lossy(magic).into_owned(),
                });
            }
            return Err(EmbedderFileError::BadMagic);
        }
        if bytes.len() < HEADER {
            return Err(EmbedderFileError::Truncated {
                expected: HEADER,
                found: bytes.len(),
            });
        }
        let dims = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let vocab = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let expected = dims
            .checked_mul(vocab)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(HEADER))
            .unwrap_or(usize::MAX);
        if bytes.len() < expected {
            return Err(EmbedderFileError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(EmbedderFileError::TrailingBytes(bytes.len() - expected));
        }
        let weights = bytes[HEADER..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_weights(dims, vocab, weights, seed)
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedderFileError> {
        let io_err = |source| EmbedderFileError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(&self.to_bytes()).map_err(io_err)?;
        file.sync_all().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, EmbedderFileError> {
        let bytes = fs::read(path).map_err(|source| EmbedderFileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// `normalize(W·b)` where `b` holds hashed token counts over `V` buckets.
pub fn embed_projected(tokens: &TokenSequence, embedder: &ProjectionEmbedder) -> EmbeddingVector {
    if tokens.is_empty() {
        return EmbeddingVector::zeros(embedder.dims);
    }
    let counts = bucket_counts(tokens, embedder.vocab_buckets);
    normalize(&EmbeddingVector::new(embedder.project_counts(&counts)))
}

/// The embedder a pipeline uses for one side of retrieval.
#[derive(Debug, Clone)]
pub enum Embedder {
    Hashed { dims: usize, seed: u64 },
    Projected(ProjectionEmbedder),
}

impl Embedder {
    pub fn dims(&self) -> usize {
        match self {
            Embedder::Hashed { dims, .. } => *dims,
            Embedder::Projected(p) => p.dims(),
        }
    }

    pub fn embed(&self, tokens: &TokenSequence) -> EmbeddingVector {
        match self {
            Embedder::Hashed { dims, seed } => embed_hashed(tokens, *dims, *seed),
            Embedder::Projected(p) => p.embed(tokens),
        }
    }
}
