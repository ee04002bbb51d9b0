//! End-to-end orchestration: embed, retrieve, fuse, hop and generate, plus
//! corpus ingestion and batch answering.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{BackendKind, Mode, PipelineConfig};
use crate::corpus::{chunk_document, clean_text, load_corpus, tokenize, CorpusError, RawDocument};
use crate::embedding::{Embedder, EmbedderFileError};
use crate::fusion::{fuse_tempered, tempered_attention_weights, FusionError};
use crate::generation::{
    build_prompt, ExtractiveGenerator, GenerationError, Generator, Prompt, RemoteGenerator,
};
use crate::multihop::{rerank, run_multihop, HopError, HopState, RerankedHit};
use crate::vector_index::{IndexEntry, IndexError, RetrievalHit, VectorIndex};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("embed stage: {0}")]
    Embed(String),
    #[error("retrieve stage: {0}")]
    Retrieve(#[source] IndexError),
    #[error("fuse stage: {0}")]
    Fuse(#[source] FusionError),
    #[error("multihop stage: {0}")]
    MultiHop(#[source] HopError),
    #[error("generate stage: {0}")]
    Generate(#[source] GenerationError),
    #[error("config dims {config} do not match index dims {index}")]
    DimsMismatch { config: usize, index: usize },
    #[error("embedder dims {embedder} do not match index dims {index}")]
    EmbedderMismatch { embedder: usize, index: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Embedder(#[from] EmbedderFileError),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed question record on line {line}: {message}")]
    MalformedQuestion { line: usize, message: String },
}

impl PipelineError {
    pub fn is_backend(&self) -> bool {
        matches!(self, PipelineError::Generate(e) if e.is_backend())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub embed: f64,
    pub retrieve: f64,
    pub fuse: f64,
    pub multihop: f64,
    pub generate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub query_id: String,
    pub question: String,
    pub answer: String,
    pub citations: Vec<String>,
    pub ranked_chunk_ids: Vec<String>,
    pub mode: String,
    pub backend: String,
    pub timings_ms: StageTimings,
}

/// A record plus the intermediate state needed for traces.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub record: RunRecord,
    pub initial_hits: Vec<RetrievalHit>,
    pub state: Option<HopState>,
    pub reranked: Vec<RerankedHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchQuestion {
    pub query_id: String,
    pub question: String,
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

pub struct Pipeline<'a> {
    pub index: &'a VectorIndex,
    pub embedder: &'a Embedder,
    pub config: &'a PipelineConfig,
    pub generator: &'a dyn Generator,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        index: &'a VectorIndex,
        embedder: &'a Embedder,
        config: &'a PipelineConfig,
        generator: &'a dyn Generator,
    ) -> Result<Self, PipelineError> {
        if embedder.dims() != index.dims() {
            return Err(PipelineError::EmbedderMismatch {
                embedder: embedder.dims(),
                index: index.dims(),
            });
        }
        if matches!(embedder, Embedder::Hashed { .. }) && config.dims != index.dims() {
            return Err(PipelineError::DimsMismatch {
                config: config.dims,
                index: index.dims(),
            });
        }
        Ok(Self {
            index,
            embedder,
            config,
            generator,
        })
    }

    /// Top-k hits for a question, without fusion or generation.
    pub fn retrieve(&self, question: &str) -> Result<Vec<RetrievalHit>, PipelineError> {
        let q = self.embed_question(question)?;
        self.index
            .search_topk(&q, self.config.k)
            .map_err(PipelineError::Retrieve)
    }

    /// Top-k hits paired with their initial fusion weights.
    pub fn explain(&self, question: &str) -> Result<Vec<(RetrievalHit, f64)>, PipelineError> {
        let hits = self.retrieve(question)?;
        let sims: Vec<f64> = hits.iter().map(|h| h.score).collect();
        if sims.is_empty() {
            return Ok(Vec::new());
        }
        let weights = tempered_attention_weights(&sims, self.config.hop.temperature)
            .map_err(PipelineError::Fuse)?;
        Ok(hits.into_iter().zip(weights).collect())
    }

    fn embed_question(
        &self,
        question: &str,
    ) -> Result<crate::embedding::EmbeddingVector, PipelineError> {
        let tokens = tokenize(&clean_text(question));
        if tokens.is_empty() {
            return Err(PipelineError::Embed("question has no tokens".into()));
        }
        let q = self.embedder.embed(&tokens);
        if !q.is_normalized() {
            return Err(PipelineError::Embed(
                "question embedding is degenerate".into(),
            ));
        }
        Ok(q)
    }

    pub fn answer_query(
        &self,
        query_id: &str,
        question: &str,
    ) -> Result<QueryOutcome, PipelineError> {
        let mut timings = StageTimings::default();
        let mut outcome = QueryOutcome {
            record: RunRecord {
                query_id: query_id.to_string(),
                question: question.to_string(),
                answer: String::new(),
                citations: Vec::new(),
                ranked_chunk_ids: Vec::new(),
                mode: self.config.mode.to_string(),
                backend: self.generator.name().to_string(),
                timings_ms: StageTimings::default(),
            },
            initial_hits: Vec::new(),
            state: None,
            reranked: Vec::new(),
        };

        if self.config.mode == Mode::GenerationOnly {
            let start = Instant::now();
            let prompt = Prompt::bare(question).map_err(PipelineError::Generate)?;
            let answer = self
                .generator
                .generate(&prompt)
                .map_err(PipelineError::Generate)?;
            timings.generate = elapsed_ms(start);
            outcome.record.answer = answer.text;
            outcome.record.citations = answer.citations;
            outcome.record.timings_ms = timings;
            return Ok(outcome);
        }

        let start = Instant::now();
        let q = self.embed_question(question)?;
        timings.embed = elapsed_ms(start);

        let start = Instant::now();
        let hits = self
            .index
            .search_topk(&q, self.config.k)
            .map_err(PipelineError::Retrieve)?;
        timings.retrieve = elapsed_ms(start);
        if hits.is_empty() {
            return Err(PipelineError::Retrieve(IndexError::Corrupt(
                "index is empty".into(),
            )));
        }
        outcome.record.ranked_chunk_ids = hits.iter().map(|h| h.chunk_id.clone()).collect();
        outcome.initial_hits = hits.clone();

        if self.config.mode == Mode::RetrievalOnly {
            outcome.record.timings_ms = timings;
            return Ok(outcome);
        }

        let start = Instant::now();
        let vectors = hits
            .iter()
            .map(|h| self.index.vector(&h.chunk_id).cloned())
            .collect::<Result<Vec<_>, _>>()
            .map_err(PipelineError::Retrieve)?;
        let fused = fuse_tempered(&hits, &vectors, self.config.hop.temperature)
            .map_err(PipelineError::Fuse)?;
        timings.fuse = elapsed_ms(start);

        let start = Instant::now();
        let state = run_multihop(&q, fused, self.index, &self.config.hop)
            .map_err(PipelineError::MultiHop)?;
        outcome.reranked =
            rerank(&hits, &state.fused, self.index).map_err(PipelineError::MultiHop)?;
        timings.multihop = elapsed_ms(start);

        let start = Instant::now();
        let prompt = build_prompt(&state, self.index, question, self.config.max_chunks)
            .map_err(PipelineError::Generate)?;
        let answer = self
            .generator
            .generate(&prompt)
            .map_err(PipelineError::Generate)?;
        timings.generate = elapsed_ms(start);

        outcome.record.answer = answer.text;
        outcome.record.citations = answer.citations;
        outcome.record.timings_ms = timings;
        outcome.state = Some(state);
        Ok(outcome)
    }

    /// Answers every question, up to the generator's in-flight cap at once.
    /// Outcomes come back in input order.
    pub fn answer_batch(
        &self,
        questions: &[BatchQuestion],
    ) -> Vec<Result<QueryOutcome, PipelineError>> {
        let workers = thread::available_parallelism()
            .map_or(1, |n| n.get())
            .min(self.generator.max_in_flight())
            .min(questions.len())
            .max(1);
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<QueryOutcome, PipelineError>>>> =
            Mutex::new((0..questions.len()).map(|_| None).collect());
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(q) = questions.get(i) else { break };
                    let result = self.answer_query(&q.query_id, &q.question);
                    slots.lock().unwrap()[i] = Some(result);
                });
            }
        });
        slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every slot is filled"))
            .collect()
    }
}

pub fn make_generator(config: &PipelineConfig) -> Result<Box<dyn Generator>, PipelineError> {
    Ok(match config.backend {
        BackendKind::Extractive => Box::new(ExtractiveGenerator),
        BackendKind::Remote => {
            Box::new(RemoteGenerator::new(config.remote.clone()).map_err(PipelineError::Generate)?)
        }
    })
}

pub fn parse_questions(contents: &str) -> Result<Vec<BatchQuestion>, PipelineError> {
    contents
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::MalformedQuestion {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_questions(path: &Path) -> Result<Vec<BatchQuestion>, PipelineError> {
    let contents = fs::read_to_string(path).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_questions(&contents)
}

/// One JSON object per line.
pub fn records_to_jsonl(records: &[RunRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("run records serialize") + "\n")
        .collect()
}

const PREVIEW_DIMS: usize = 8;

#[derive(Serialize)]
struct WeightEntry<'a> {
    chunk_id: &'a str,
    weight: f64,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine<'a> {
    Hop {
        query_id: &'a str,
        hop: usize,
        refined_query_preview: &'a [f64],
        hits: &'a [RetrievalHit],
        weights: Vec<WeightEntry<'a>>,
        carried_weight: f64,
    },
    Rerank {
        query_id: &'a str,
        scores: &'a [RerankedHit],
    },
}

/// Per-hop records followed by the (initial, reranked) score pairs.
pub fn trace_to_jsonl(outcome: &QueryOutcome) -> String {
    let query_id = outcome.record.query_id.as_str();
    let mut lines = Vec::new();
    if let Some(state) = &outcome.state {
        for record in &state.trace {
            let values = record.refined_query.values();
            lines.push(TraceLine::Hop {
                query_id,
                hop: record.hop,
                refined_query_preview: &values[..values.len().min(PREVIEW_DIMS)],
                hits: &record.hits,
                weights: record
                    .weights
                    .iter()
                    .map(|(id, w)| WeightEntry {
                        chunk_id: id,
                        weight: *w,
                    })
                    .collect(),
                carried_weight: record.carried_weight,
            });
        }
    }
    if !outcome.reranked.is_empty() {
        lines.push(TraceLine::Rerank {
            query_id,
            scores: &outcome.reranked,
        });
    }
    lines
        .iter()
        .map(|l| serde_json::to_string(l).expect("trace lines serialize") + "\n")
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestStats {
    pub documents: usize,
    pub chunks: usize,
}

/// Clean, tokenize, chunk and embed `docs` into a fresh index.
pub fn build_index(
    docs: &[RawDocument],
    config: &PipelineConfig,
    embedder: &Embedder,
) -> Result<(VectorIndex, IngestStats), PipelineError> {
    if docs.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    let mut index = VectorIndex::new(embedder.dims());
    let mut chunks = 0;
    for doc in docs {
        for chunk in chunk_document(doc, config.chunk_size, config.overlap)? {
            index.add(IndexEntry {
                vector: embedder.embed(&chunk.tokens),
                chunk_id: chunk.chunk_id,
                text: chunk.text,
            })?;
            chunks += 1;
        }
    }
    Ok((
        index,
        IngestStats {
            documents: docs.len(),
            chunks,
        },
    ))
}

pub fn ingest_command(
    corpus: &Path,
    index_path: &Path,
    config: &PipelineConfig,
    embedder: &Embedder,
) -> Result<IngestStats, PipelineError> {
    let docs = load_corpus(corpus)?;
    let (index, stats) = build_index(&docs, config, embedder)?;
    index.save(index_path)?;
    Ok(stats)
}
