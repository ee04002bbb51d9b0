//! Answer generation from the final hop state.
//!
//! The generator sees chunk texts and their fusion weights rather than the
//! fused vector itself. Two backends implement [`Generator`]: an extractive
//! sentence picker that needs no network, and a client for the
//! OpenAI-compatible `/v1/chat/completions` endpoint.

use std::collections::{BTreeMap, HashSet};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::corpus::{clean_text, tokenize};
use crate::multihop::HopState;
use crate::vector_index::VectorIndex;

pub const DEFAULT_SYSTEM_PROMPT: &str =
    "Answer the question using only the numbered context passages. \
Cite the passages you rely on by their bracketed numbers, for example [1].";

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("no context")]
    NoContext,
    #[error("question is empty")]
    EmptyQuestion,
    #[error("max_chunks must be ≥ 1")]
    ZeroMaxChunks,
    #[error("chunk {0:?} is not in the index")]
    UnknownChunk(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

impl GenerationError {
    /// True for failures of the remote service rather than of the inputs.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            GenerationError::Timeout(_)
                | GenerationError::Status { .. }
                | GenerationError::Network(_)
                | GenerationError::Malformed(_)
                | GenerationError::Config(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextBlock {
    pub chunk_id: String,
    pub text: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub system: String,
    /// Sorted by weight descending, ties by chunk id.
    pub context_blocks: Vec<ContextBlock>,
    pub question: String,
}

impl Prompt {
    /// A prompt with no retrieved context.
    pub fn bare(question: &str) -> Result<Self, GenerationError> {
        if question.trim().is_empty() {
            return Err(GenerationError::EmptyQuestion);
        }
        Ok(Self {
            system: DEFAULT_SYSTEM_PROMPT.to_string(),
            context_blocks: Vec::new(),
            question: question.to_string(),
        })
    }

    /// Instructions followed by `[n] text` context lines.
    pub fn render_system(&self) -> String {
        let mut out = self.system.clone();
        if !self.context_blocks.is_empty() {
            out.push_str("\n\nContext:");
            for (i, block) in self.context_blocks.iter().enumerate() {
                out.push_str(&format!("\n[{}] {}", i + 1, block.text));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub citations: Vec<String>,
    pub backend: String,
    pub hop_trace_ref: Option<String>,
}

/// Collects the `max_chunks` highest-weight chunks over the initial context
/// and every hop. A later hop's weight replaces an earlier one for the same
/// chunk.
pub fn build_prompt(
    state: &HopState,
    index: &VectorIndex,
    question: &str,
    max_chunks: usize,
) -> Result<Prompt, GenerationError> {
    if max_chunks == 0 {
        return Err(GenerationError::ZeroMaxChunks);
    }
    if question.trim().is_empty() {
        return Err(GenerationError::EmptyQuestion);
    }
    let mut latest: BTreeMap<&str, f64> = BTreeMap::new();
    let layers =
        std::iter::once(&state.initial.weights).chain(state.trace.iter().map(|r| &r.weights));
    for weights in layers {
        for (id, w) in weights {
            latest.insert(id.as_str(), *w);
        }
    }
    if latest.is_empty() {
        return Err(GenerationError::NoContext);
    }
    let mut ranked: Vec<(&str, f64)> = latest.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_chunks);

    let context_blocks = ranked
        .into_iter()
        .map(|(id, weight)| {
            let entry = index
                .get(id)
                .ok_or_else(|| GenerationError::UnknownChunk(id.to_string()))?;
            Ok(ContextBlock {
                chunk_id: id.to_string(),
                text: entry.text.clone(),
                weight,
            })
        })
        .collect::<Result<Vec<_>, GenerationError>>()?;

    Ok(Prompt {
        system: DEFAULT_SYSTEM_PROMPT.to_string(),
        context_blocks,
        question: question.to_string(),
    })
}

pub trait Generator: Send + Sync {
    fn name(&self) -> &str;

    fn generate(&self, prompt: &Prompt) -> Result<Answer, GenerationError>;

    /// Upper bound on concurrent `generate` calls.
    fn max_in_flight(&self) -> usize {
        usize::MAX
    }
}

/// Sentences end at `.`, `!` or `?` followed by whitespace or end of text.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((pos, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = chars.peek().is_none_or(|(_, next)| next.is_whitespace());
            if at_boundary {
                let end = pos + c.len_utf8();
                let sentence = text[start..end].trim();
                if !sentence.is_empty() {
                    out.push(sentence);
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Picks the context sentence with the highest
/// `(distinct question tokens present) × (block weight)`.
#[derive(Debug, Default, Clone)]
pub struct ExtractiveGenerator;

impl Generator for ExtractiveGenerator {
    fn name(&self) -> &str {
        "extractive"
    }

    fn generate(&self, prompt: &Prompt) -> Result<Answer, GenerationError> {
        let question = tokenize(&clean_text(&prompt.question));
        let wanted: HashSet<&str> = question.tokens().iter().map(String::as_str).collect();

        let mut best: Option<(f64, &str, &str)> = None;
        let mut fallback: Option<(&str, &str)> = None;
        for block in &prompt.context_blocks {
            for sentence in split_sentences(&block.text) {
                fallback.get_or_insert((sentence, &block.chunk_id));
                let tokens = tokenize(&clean_text(sentence));
                let present: HashSet<&str> = tokens.tokens().iter().map(String::as_str).collect();
                let overlap = wanted.intersection(&present).count();
                let score = overlap as f64 * block.weight;
                if overlap > 0 && best.is_none_or(|(s, _, _)| score > s) {
                    best = Some((score, sentence, &block.chunk_id));
                }
            }
        }
        let chosen = best.map(|(_, s, id)| (s, id)).or(fallback);
        Ok(match chosen {
            Some((sentence, chunk_id)) => Answer {
                text: sentence.to_string(),
                citations: vec![chunk_id.to_string()],
                backend: self.name().to_string(),
                hop_trace_ref: None,
            },
            None => Answer {
                text: String::new(),
                citations: Vec::new(),
                backend: self.name().to_string(),
                hop_trace_ref: None,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    /// First retry delay; doubles on each further retry.
    pub backoff_base: Duration,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            model: String::new(),
            api_key: None,
            timeout: Duration::from_secs(60),
            max_retries: 2,
            backoff_base: Duration::from_secs(1),
            temperature: 0.0,
            max_tokens: 512,
            max_in_flight: 4,
        }
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Deserialize)]
struct CompletionMessage {
    content: Option<String>,
}

pub struct RemoteGenerator {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
}

impl RemoteGenerator {
    pub fn new(config: RemoteConfig) -> Result<Self, GenerationError> {
        if config.base_url.trim().is_empty() {
            return Err(GenerationError::Config("base URL is not set".into()));
        }
        if config.model.trim().is_empty() {
            return Err(GenerationError::Config("model name is not set".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GenerationError::Config(e.to_string()))?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/v1/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn request_body(&self, prompt: &Prompt) -> serde_json::Value {
        json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": prompt.render_system()},
                {"role": "user", "content": prompt.question},
            ],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        })
    }

    fn send_once(&self, body: &serde_json::Value) -> Result<String, GenerationError> {
        let mut request = self.client.post(self.endpoint()).json(body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| self.transport_error(e))?;
        let status = response.status();
        let text = response.text().map_err(|e| self.transport_error(e))?;
        if !status.is_success() {
            return Err(GenerationError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        let parsed: CompletionResponse =
            serde_json::from_str(&text).map_err(|e| GenerationError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GenerationError::Malformed("response has no message content".into()))
    }

    fn transport_error(&self, e: reqwest::Error) -> GenerationError {
        if e.is_timeout() {
            GenerationError::Timeout(self.config.timeout)
        } else {
            GenerationError::Network(e.to_string())
        }
    }
}

fn retryable(err: &GenerationError) -> bool {
    match err {
        GenerationError::Status { status, .. } => *status >= 500 || *status == 429,
        GenerationError::Network(_) => true,
        _ => false,
    }
}

/// Chunk ids whose 1-based `[n]` markers appear in `text`, in order of first
/// appearance.
pub fn parse_citations(text: &str, blocks: &[ContextBlock]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            let digits_end = bytes[i + 1..]
                .iter()
                .position(|b| !b.is_ascii_digit())
                .map_or(bytes.len(), |p| i + 1 + p);
            if digits_end > i + 1 && bytes.get(digits_end) == Some(&b']') {
                if let Ok(n) = text[i + 1..digits_end].parse::<usize>() {
                    if let Some(block) = n.checked_sub(1).and_then(|k| blocks.get(k)) {
                        if !out.contains(&block.chunk_id) {
                            out.push(block.chunk_id.clone());
                        }
                    }
                }
                i = digits_end;
            }
        }
        i += 1;
    }
    out
}

impl Generator for RemoteGenerator {
    fn name(&self) -> &str {
        "remote"
    }

    fn generate(&self, prompt: &Prompt) -> Result<Answer, GenerationError> {
        let body = self.request_body(prompt);
        let mut attempt = 0;
        let text = loop {
            match self.send_once(&body) {
                Ok(text) => break text,
                Err(err) if attempt < self.config.max_retries && retryable(&err) => {
                    thread::sleep(self.config.backoff_base * 2u32.pow(attempt));
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        };
        Ok(Answer {
            citations: parse_citations(&text, &prompt.context_blocks),
            text,
            backend: self.name().to_string(),
            hop_trace_ref: None,
        })
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight.max(1)
    }
}
