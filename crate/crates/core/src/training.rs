//! Joint retrieval/generation objective and a mini-batch gradient descent
//! loop for the query-side [`ProjectionEmbedder`].
//!
//! Document vectors stay frozen in the index; only `W` moves. The gradient
//! of the retrieval loss is analytic and flows through the softmax, the
//! cosine similarity and the normalization of `W·b`:
//!
//! ```text
//! u = W b,  q = u / ‖u‖,  s_i = q · ĉ_i,  p = softmax(s)
//! ∂L/∂q = Σ_i (p_i − [i = true]) ĉ_i
//! ∂L/∂u = (∂L/∂q − (q · ∂L/∂q) q) / ‖u‖
//! ∂L/∂W = (∂L/∂u) bᵀ
//! ```
//!
//! Since `b` is sparse, a gradient is stored as one column per touched
//! bucket.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{clean_text, tokenize, TokenSequence};
use crate::embedding::{bucket_counts, EmbeddingVector, ProjectionEmbedder};
use crate::vector_index::{cosine_unchecked, IndexError, VectorIndex};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("true index {index} out of range for {len} candidates")]
    InvalidIndex { index: usize, len: usize },
    #[error("true chunk {0} is not among the candidates")]
    MissingTrueChunk(String),
    #[error("empty similarity list")]
    EmptySims,
    #[error("empty probability list")]
    EmptyProbs,
    #[error("token probability {0} outside (0, 1]")]
    BadProbability(f64),
    #[error("degenerate embedding")]
    DegenerateEmbedding,
    #[error("no training examples")]
    NoExamples,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss in epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("embedder has {embedder} dims but the index has {index}")]
    DimensionMismatch { embedder: usize, index: usize },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("cannot read examples {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed example on line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub query: TokenSequence,
    pub true_chunk_id: String,
    pub candidate_chunk_ids: Vec<String>,
    /// Per-token probabilities of the reference answer, when a generator can
    /// supply them.
    pub target_token_probs: Option<Vec<f64>>,
}

impl TrainingExample {
    pub fn true_position(&self) -> Option<usize> {
        self.candidate_chunk_ids
            .iter()
            .position(|c| *c == self.true_chunk_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub epoch: usize,
    pub retrieval: f64,
    pub generation: f64,
    pub total: f64,
    pub lambda_retrieval: f64,
    pub lambda_generation: f64,
}

impl LossReport {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.epoch, self.retrieval, self.generation, self.total
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda_retrieval: f64,
    pub lambda_generation: f64,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.1,
            lambda_retrieval: 1.0,
            lambda_generation: 1.0,
            batch_size: 8,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainingError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainingError::Config(
                "learning_rate must be finite and ≥ 0".into(),
            ));
        }
        if !(self.lambda_retrieval >= 0.0 && self.lambda_generation >= 0.0) {
            return Err(TrainingError::Config("loss weights must be ≥ 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainingError::Config("batch_size must be ≥ 1".into()));
        }
        Ok(())
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `−log softmax(sims)[true_index]`.
pub fn retrieval_loss(sims: &[f64], true_index: usize) -> Result<f64, TrainingError> {
    if sims.is_empty() {
        return Err(TrainingError::EmptySims);
    }
    if true_index >= sims.len() {
        return Err(TrainingError::InvalidIndex {
            index: true_index,
            len: sims.len(),
        });
    }
    // rounding can leave a tiny negative value when the true score dominates
    Ok((log_sum_exp(sims) - sims[true_index]).max(0.0))
}

/// `−Σ log p_t`, summed over tokens.
pub fn generation_loss(token_probs: &[f64]) -> Result<f64, TrainingError> {
    if token_probs.is_empty() {
        return Err(TrainingError::EmptyProbs);
    }
    if let Some(&bad) = token_probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(TrainingError::BadProbability(bad));
    }
    Ok(-token_probs.iter().map(|p| p.ln()).sum::<f64>())
}

pub fn total_loss(
    retrieval: f64,
    generation: f64,
    lambda_retrieval: f64,
    lambda_generation: f64,
) -> f64 {
    lambda_retrieval * retrieval + lambda_generation * generation
}

/// Sparse `∂L/∂W`: one dense column per bucket the query touches.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalGradient {
    pub loss: f64,
    pub columns: Vec<(usize, Vec<f64>)>,
}

impl RetrievalGradient {
    /// Row-major `dims x vocab_buckets` matrix.
    pub fn to_dense(&self, dims: usize, vocab_buckets: usize) -> Vec<f64> {
        let mut out = vec![0.0; dims * vocab_buckets];
        for (col, values) in &self.columns {
            for (row, v) in values.iter().enumerate() {
                out[row * vocab_buckets + col] += v;
            }
        }
        out
    }

    /// Frobenius inner product `⟨∇, W⟩`.
    pub fn inner(&self, embedder: &ProjectionEmbedder) -> f64 {
        self.columns
            .iter()
            .map(|(col, values)| {
                values
                    .iter()
                    .enumerate()
                    .map(|(row, v)| v * embedder.weight(row, *col))
                    .sum::<f64>()
            })
            .sum()
    }
}

fn candidate_units(
    example: &TrainingExample,
    index: &VectorIndex,
) -> Result<Vec<Vec<f64>>, TrainingError> {
    example
        .candidate_chunk_ids
        .iter()
        .map(|id| {
            let v = index.vector(id)?;
            let n = v.norm();
            Ok(if n < 1e-12 {
                vec![0.0; v.dims()]
            } else {
                v.values().iter().map(|x| x / n).collect()
            })
        })
        .collect()
}

/// Loss and analytic gradient of the retrieval loss for one example.
pub fn retrieval_loss_gradient(
    embedder: &ProjectionEmbedder,
    example: &TrainingExample,
    index: &VectorIndex,
) -> Result<RetrievalGradient, TrainingError> {
    if embedder.dims() != index.dims() {
        return Err(TrainingError::DimensionMismatch {
            embedder: embedder.dims(),
            index: index.dims(),
        });
    }
    let true_index = example
        .true_position()
        .ok_or_else(|| TrainingError::MissingTrueChunk(example.true_chunk_id.clone()))?;
    let counts = bucket_counts(&example.query, embedder.vocab_buckets());
    let u = embedder.project_counts(&counts);
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if counts.is_empty() || norm <= 1e-12 {
        return Err(TrainingError::DegenerateEmbedding);
    }
    let q: Vec<f64> = u.iter().map(|x| x / norm).collect();
    let q_vec = EmbeddingVector::new(q.clone());

    let units = candidate_units(example, index)?;
    let sims: Vec<f64> = example
        .candidate_chunk_ids
        .iter()
        .map(|id| Ok(cosine_unchecked(&q_vec, index.vector(id)?)))
        .collect::<Result<_, TrainingError>>()?;
    let loss = retrieval_loss(&sims, true_index)?;

    let lse = log_sum_exp(&sims);
    let mut grad_q = vec![0.0; q.len()];
    for (i, unit) in units.iter().enumerate() {
        let coeff = (sims[i] - lse).exp() - if i == true_index { 1.0 } else { 0.0 };
        for (g, c) in grad_q.iter_mut().zip(unit) {
            *g += coeff * c;
        }
    }
    let radial: f64 = grad_q.iter().zip(&q).map(|(g, x)| g * x).sum();
    let grad_u: Vec<f64> = grad_q
        .iter()
        .zip(&q)
        .map(|(g, x)| (g - radial * x) / norm)
        .collect();

    let columns = counts
        .iter()
        .map(|&(col, count)| (col, grad_u.iter().map(|g| g * count).collect()))
        .collect();
    Ok(RetrievalGradient { loss, columns })
}

/// Supplies per-token probabilities for the generation loss.
pub trait TokenProbabilitySource {
    fn token_probs(&self, example: &TrainingExample) -> Option<Vec<f64>>;
}

/// Reads the probabilities carried on each example.
#[derive(Debug, Default, Clone, Copy)]
pub struct SuppliedProbabilities;

impl TokenProbabilitySource for SuppliedProbabilities {
    fn token_probs(&self, example: &TrainingExample) -> Option<Vec<f64>> {
        example.target_token_probs.clone()
    }
}

fn mean_generation_loss(
    examples: &[TrainingExample],
    source: &dyn TokenProbabilitySource,
) -> Result<f64, TrainingError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for example in examples {
        if let Some(probs) = source.token_probs(example) {
            total += generation_loss(&probs)?;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Mean retrieval loss of `embedder` over `examples`, with no update.
pub fn mean_retrieval_loss(
    embedder: &ProjectionEmbedder,
    examples: &[TrainingExample],
    index: &VectorIndex,
) -> Result<f64, TrainingError> {
    if examples.is_empty() {
        return Err(TrainingError::NoExamples);
    }
    let mut total = 0.0;
    for example in examples {
        total += retrieval_loss_gradient(embedder, example, index)?.loss;
    }
    Ok(total / examples.len() as f64)
}

pub fn train(
    index: &VectorIndex,
    examples: &[TrainingExample],
    config: &TrainConfig,
    initial: ProjectionEmbedder,
) -> Result<(ProjectionEmbedder, Vec<LossReport>), TrainingError> {
    train_with_source(index, examples, config, initial, &SuppliedProbabilities)
}

/// Seeded mini-batch gradient descent. Each epoch's report averages the
/// per-example retrieval losses measured just before their batch's update.
pub fn train_with_source(
    index: &VectorIndex,
    examples: &[TrainingExample],
    config: &TrainConfig,
    initial: ProjectionEmbedder,
    source: &dyn TokenProbabilitySource,
) -> Result<(ProjectionEmbedder, Vec<LossReport>), TrainingError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(TrainingError::NoExamples);
    }
    if initial.dims() != index.dims() {
        return Err(TrainingError::DimensionMismatch {
            embedder: initial.dims(),
            index: index.dims(),
        });
    }
    let mut embedder = initial;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut reports = Vec::with_capacity(config.epochs);
    let vocab = embedder.vocab_buckets();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let grads = batch
                .iter()
                .map(|&i| retrieval_loss_gradient(&embedder, &examples[i], index))
                .collect::<Result<Vec<_>, _>>()?;
            let step = config.learning_rate * config.lambda_retrieval / batch.len() as f64;
            let weights = embedder.weights_mut();
            for grad in &grads {
                epoch_loss += grad.loss;
                if step == 0.0 {
                    continue;
                }
                for (col, values) in &grad.columns {
                    for (row, g) in values.iter().enumerate() {
                        weights[row * vocab + col] -= step * g;
                    }
                }
            }
        }
        let retrieval = epoch_loss / examples.len() as f64;
        let generation = mean_generation_loss(examples, source)?;
        let total = total_loss(
            retrieval,
            generation,
            config.lambda_retrieval,
            config.lambda_generation,
        );
        if !total.is_finite() || embedder.weights().iter().any(|w| !w.is_finite()) {
            return Err(TrainingError::NonFinite { epoch });
        }
        reports.push(LossReport {
            epoch,
            retrieval,
            generation,
            total,
            lambda_retrieval: config.lambda_retrieval,
            lambda_generation: config.lambda_generation,
        });
    }
    Ok((embedder, reports))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    query: String,
    true_chunk_id: String,
    candidates: Vec<String>,
    #[serde(default)]
    token_probs: Option<Vec<f64>>,
}

/// Newline-delimited `{query, true_chunk_id, candidates, token_probs?}`.
pub fn parse_examples(contents: &str) -> Result<Vec<TrainingExample>, TrainingError> {
    let mut out = Vec::new();
    for (idx, line) in contents.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExampleRecord =
            serde_json::from_str(line).map_err(|e| TrainingError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        if !record.candidates.contains(&record.true_chunk_id) {
            return Err(TrainingError::Malformed {
                line: line_no,
                message: format!(
                    "true_chunk_id {:?} is not among the candidates",
                    record.true_chunk_id
                ),
            });
        }
        out.push(TrainingExample {
            query: tokenize(&clean_text(&record.query)),
            true_chunk_id: record.true_chunk_id,
            candidate_chunk_ids: record.candidates,
            target_token_probs: record.token_probs,
        });
    }
    Ok(out)
}

pub fn load_examples(path: &Path) -> Result<Vec<TrainingExample>, TrainingError> {
    let contents = fs::read_to_string(path).map_err(|source| TrainingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_examples(&contents)
}
