//! Iterative multi-hop refinement of the fused context.
//!
//! Each hop mixes the original query with the current fused representation,
//! retrieves fresh evidence with that refined query and re-fuses. The
//! previous fused vector joins each hop's fusion as one extra pseudo-chunk
//! scored by its cosine to the refined query, so context carries forward
//! without the pool growing.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::embedding::{normalize, EmbeddingVector};
use crate::fusion::{tempered_attention_weights, weighted_sum, FusedContext, FusionError};
use crate::vector_index::{cosine_unchecked, hit_order, IndexError, RetrievalHit, VectorIndex};

#[derive(Debug, Error)]
pub enum HopError {
    #[error("invalid hop config: {0}")]
    Config(String),
    #[error("hop {t} exceeds configured hop count {hops}")]
    Exhausted { t: usize, hops: usize },
    #[error("rerank needs at least one initial hit")]
    NoHits,
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HopConfig {
    pub hops: usize,
    pub per_hop_k: usize,
    /// Weight of the original query in the refined query.
    pub alpha_mix: f64,
    pub dedupe: bool,
    /// Softmax temperature for the per-hop fusion.
    pub temperature: f64,
}

impl Default for HopConfig {
    fn default() -> Self {
        Self {
            hops: 2,
            per_hop_k: 5,
            alpha_mix: 0.5,
            dedupe: true,
            temperature: 1.0,
        }
    }
}

impl HopConfig {
    pub fn validate(&self) -> Result<(), HopError> {
        if self.per_hop_k == 0 {
            return Err(HopError::Config("per_hop_k must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_mix) {
            return Err(HopError::Config("alpha_mix must lie in [0, 1]".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(HopError::Config("temperature must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HopRecord {
    pub hop: usize,
    pub refined_query: EmbeddingVector,
    pub hits: Vec<RetrievalHit>,
    pub weights: Vec<(String, f64)>,
    /// Weight given to the previous fused vector.
    pub carried_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HopState {
    pub t: usize,
    pub query_vec: EmbeddingVector,
    pub initial: FusedContext,
    pub fused: EmbeddingVector,
    pub refined_query: EmbeddingVector,
    pub trace: Vec<HopRecord>,
    pub seen: BTreeSet<String>,
}

impl HopState {
    /// Hop zero: `D_hop^(0) = D_agg`.
    pub fn initial(q: &EmbeddingVector, initial: FusedContext) -> Self {
        Self {
            t: 0,
            query_vec: q.clone(),
            fused: initial.vector.clone(),
            refined_query: normalize(q),
            initial,
            trace: Vec::new(),
            seen: BTreeSet::new(),
        }
    }
}

fn mix(alpha: f64, q: &EmbeddingVector, fused: &EmbeddingVector) -> EmbeddingVector {
    let values = q
        .values()
        .iter()
        .zip(fused.values())
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect();
    normalize(&EmbeddingVector::new(values))
}

pub fn hop_step(
    state: HopState,
    index: &VectorIndex,
    config: &HopConfig,
) -> Result<HopState, HopError> {
    config.validate()?;
    if state.t >= config.hops {
        return Err(HopError::Exhausted {
            t: state.t,
            hops: config.hops,
        });
    }
    let HopState {
        t,
        query_vec,
        initial,
        fused,
        mut trace,
        mut seen,
        ..
    } = state;

    let refined = mix(config.alpha_mix, &query_vec, &fused);
    let hits = if config.dedupe {
        index.search_filtered(&refined, config.per_hop_k, |id| !seen.contains(id))?
    } else {
        index.search_topk(&refined, config.per_hop_k)?
    };

    let (new_fused, weights, carried_weight) = if hits.is_empty() {
        (fused, Vec::new(), 1.0)
    } else {
        let mut sims: Vec<f64> = hits.iter().map(|h| h.score).collect();
        sims.push(cosine_unchecked(&refined, &fused));
        let alphas = tempered_attention_weights(&sims, config.temperature)?;
        let mut vectors = hits
            .iter()
            .map(|h| index.vector(&h.chunk_id))
            .collect::<Result<Vec<_>, _>>()?;
        vectors.push(&fused);
        let combined = weighted_sum(&alphas, &vectors);
        let weights = hits
            .iter()
            .zip(&alphas)
            .map(|(h, &a)| (h.chunk_id.clone(), a))
            .collect();
        (combined, weights, alphas[hits.len()])
    };

    if config.dedupe {
        seen.extend(hits.iter().map(|h| h.chunk_id.clone()));
    }
    trace.push(HopRecord {
        hop: t + 1,
        refined_query: refined.clone(),
        hits,
        weights,
        carried_weight,
    });
    Ok(HopState {
        t: t + 1,
        query_vec,
        initial,
        fused: new_fused,
        refined_query: refined,
        trace,
        seen,
    })
}

pub fn run_multihop(
    q: &EmbeddingVector,
    initial: FusedContext,
    index: &VectorIndex,
    config: &HopConfig,
) -> Result<HopState, HopError> {
    config.validate()?;
    let mut state = HopState::initial(q, initial);
    while state.t < config.hops {
        state = hop_step(state, index, config)?;
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RerankedHit {
    pub chunk_id: String,
    pub initial_score: f64,
    pub reranked_score: f64,
}

/// Re-score the initial hits against the final fused representation.
pub fn rerank(
    initial_hits: &[RetrievalHit],
    final_fused: &EmbeddingVector,
    index: &VectorIndex,
) -> Result<Vec<RerankedHit>, HopError> {
    if initial_hits.is_empty() {
        return Err(HopError::NoHits);
    }
    let target = normalize(final_fused);
    let mut out = initial_hits
        .iter()
        .map(|h| {
            let v = index.vector(&h.chunk_id)?;
            Ok(RerankedHit {
                chunk_id: h.chunk_id.clone(),
                initial_score: h.score,
                reranked_score: crate::vector_index::cosine_sim(&target, v)?,
            })
        })
        .collect::<Result<Vec<_>, HopError>>()?;
    out.sort_by(|a, b| {
        hit_order(
            (&a.chunk_id, a.reranked_score),
            (&b.chunk_id, b.reranked_score),
        )
    });
    Ok(out)
}
