//! Softmax attention over retrieval scores and the weighted aggregate of the
//! retrieved chunk embeddings.

use thiserror::Error;

use crate::embedding::EmbeddingVector;
use crate::vector_index::RetrievalHit;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("cannot fuse an empty set of hits")]
    Empty,
    #[error("{hits} hits but {vectors} vectors")]
    LengthMismatch { hits: usize, vectors: usize },
    #[error("vector {index} has {actual} dims, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("similarity {0} is not finite")]
    NonFinite(f64),
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedContext {
    /// `Σ α_i d_i`, deliberately left unnormalized.
    pub vector: EmbeddingVector,
    pub weights: Vec<(String, f64)>,
    pub source_hits: Vec<RetrievalHit>,
}

/// Max-subtracted softmax of `sims`.
pub fn attention_weights(sims: &[f64]) -> Result<Vec<f64>, FusionError> {
    tempered_attention_weights(sims, 1.0)
}

/// Softmax of `sims / temperature`.
pub fn tempered_attention_weights(sims: &[f64], temperature: f64) -> Result<Vec<f64>, FusionError> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(FusionError::BadTemperature(temperature));
    }
    if sims.is_empty() {
        return Err(FusionError::Empty);
    }
    if let Some(&bad) = sims.iter().find(|s| !s.is_finite()) {
        return Err(FusionError::NonFinite(bad));
    }
    let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims
        .iter()
        .map(|s| ((s - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Convex combination `Σ weights[i] · vectors[i]`.
pub(crate) fn weighted_sum(weights: &[f64], vectors: &[&EmbeddingVector]) -> EmbeddingVector {
    let dims = vectors.first().map_or(0, |v| v.dims());
    let mut out = vec![0.0; dims];
    for (w, v) in weights.iter().zip(vectors) {
        for (slot, x) in out.iter_mut().zip(v.values()) {
            *slot += w * x;
        }
    }
    EmbeddingVector::new(out)
}

pub fn fuse(
    hits: &[RetrievalHit],
    vectors: &[EmbeddingVector],
) -> Result<FusedContext, FusionError> {
    fuse_tempered(hits, vectors, 1.0)
}

pub fn fuse_tempered(
    hits: &[RetrievalHit],
    vectors: &[EmbeddingVector],
    temperature: f64,
) -> Result<FusedContext, FusionError> {
    if hits.is_empty() || vectors.is_empty() {
        return Err(FusionError::Empty);
    }
    if hits.len() != vectors.len() {
        return Err(FusionError::LengthMismatch {
            hits: hits.len(),
            vectors: vectors.len(),
        });
    }
    let expected = vectors[0].dims();
    if let Some((index, v)) = vectors
        .iter()
        .enumerate()
        .find(|(_, v)| v.dims() != expected)
    {
        return Err(FusionError::DimensionMismatch {
            index,
            expected,
            actual: v.dims(),
        });
    }
    let sims: Vec<f64> = hits.iter().map(|h| h.score).collect();
    let alphas = tempered_attention_weights(&sims, temperature)?;
    let refs: Vec<&EmbeddingVector> = vectors.iter().collect();
    Ok(FusedContext {
        vector: weighted_sum(&alphas, &refs),
        weights: hits
            .iter()
            .zip(&alphas)
            .map(|(h, &a)| (h.chunk_id.clone(), a))
            .collect(),
        source_hits: hits.to_vec(),
    })
}
