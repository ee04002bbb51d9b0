//! Document ingestion: cleaning, tokenization and sliding-window chunking.
//!
//! Everything here is a pure function of its inputs. The token ID is a
//! 64-bit FNV-1a hash, so tokenization is stable across runs and platforms.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

const FNV_OFFSET_BASIS: u64 = 14_695_981_039_346_656_037;
const FNV_PRIME: u64 = 1_099_511_628_211;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty token has no id")]
    EmptyToken,
    #[error("empty document")]
    EmptyDocument { doc_id: String },
    #[error("invalid overlap: overlap {overlap} must be smaller than chunk size {chunk_size}")]
    InvalidOverlap { chunk_size: usize, overlap: usize },
    #[error("chunk size must be at least 1")]
    InvalidChunkSize,
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record on line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate document id {doc_id:?} on line {line}")]
    DuplicateId { line: usize, doc_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub doc_id: String,
    pub source: String,
    pub text: String,
    pub metadata: BTreeMap<String, String>,
}

impl RawDocument {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            source: String::new(),
            text: text.into(),
            metadata: BTreeMap::new(),
        }
    }
}

/// Parallel token strings and their IDs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<String>,
    ids: Vec<u64>,
}

impl TokenSequence {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens
            .into_iter()
            .map(Into::into)
            .filter(|t| !t.is_empty())
            .collect();
        let ids = tokens.iter().map(|t| fnv1a_64(t.as_bytes())).collect();
        Self { tokens, ids }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn slice(&self, start: usize, end: usize) -> TokenSequence {
        TokenSequence {
            tokens: self.tokens[start..end].to_vec(),
            ids: self.ids[start..end].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    /// Half-open `[start, end)` token range into the document's sequence.
    pub token_span: (usize, usize),
    pub text: String,
    pub tokens: TokenSequence,
}

fn fnv1a_64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |hash, &b| {
        (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

pub fn token_id(token: &str) -> Result<u64, CorpusError> {
    if token.is_empty() {
        return Err(CorpusError::EmptyToken);
    }
    Ok(fnv1a_64(token.as_bytes()))
}

/// NFC-normalize, drop control characters except `\n`/`\t`, lowercase,
/// collapse whitespace runs to one space and trim.
pub fn clean_text(raw: &str) -> String {
    // Controls go first so their removal cannot expose a new composition.
    let stripped: String = raw
        .chars()
        .filter(|c| !c.is_control() || *c == '\n' || *c == '\t')
        .collect();
    let lowered: String = stripped.nfc().collect::<String>().to_lowercase();
    let normalized: String = lowered.nfc().collect();
    normalized.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Byte ranges of each token in `clean`, using the same rules as [`tokenize`].
fn token_offsets(clean: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut run: Option<(usize, bool)> = None; // (start, is_punct)
    for (pos, c) in clean.char_indices() {
        if c.is_whitespace() {
            if let Some((start, _)) = run.take() {
                spans.push((start, pos));
            }
            continue;
        }
        let punct = c.is_ascii_punctuation();
        match run {
            Some((_, kind)) if kind == punct => {}
            Some((start, _)) => {
                spans.push((start, pos));
                run = Some((pos, punct));
            }
            None => run = Some((pos, punct)),
        }
    }
    if let Some((start, _)) = run {
        spans.push((start, clean.len()));
    }
    spans
}

/// Whitespace split, then each maximal run of ASCII punctuation becomes its
/// own token.
pub fn tokenize(clean: &str) -> TokenSequence {
    TokenSequence::from_tokens(token_offsets(clean).into_iter().map(|(s, e)| &clean[s..e]))
}

/// Clean, tokenize and slice a document into overlapping windows.
///
/// Windows advance by `chunk_size - overlap`; the last window ends at the
/// final token, so no window is ever contained in its predecessor.
pub fn chunk_document(
    doc: &RawDocument,
    chunk_size: usize,
    overlap: usize,
) -> Result<Vec<Chunk>, CorpusError> {
    if chunk_size == 0 {
        return Err(CorpusError::InvalidChunkSize);
    }
    if overlap >= chunk_size {
        return Err(CorpusError::InvalidOverlap {
            chunk_size,
            overlap,
        });
    }
    let clean = clean_text(&doc.text);
    let offsets = token_offsets(&clean);
    if offsets.is_empty() {
        return Err(CorpusError::EmptyDocument {
            doc_id: doc.doc_id.clone(),
        });
    }
    let sequence = TokenSequence::from_tokens(offsets.iter().map(|&(s, e)| &clean[s..e]));
    let n = sequence.len();
    let stride = chunk_size - overlap;

    let mut chunks = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + chunk_size).min(n);
        let text = clean[offsets[start].0..offsets[end - 1].1].to_string();
        chunks.push(Chunk {
            chunk_id: format!("{}#{}", doc.doc_id, chunks.len()),
            doc_id: doc.doc_id.clone(),
            token_span: (start, end),
            text,
            tokens: sequence.slice(start, end),
        });
        if end == n {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    id: String,
    text: String,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// Read a newline-delimited corpus file: one `{"id", "text", "metadata"?}`
/// object per line. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<RawDocument>, CorpusError> {
    let contents = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&contents, &path.display().to_string())
}

pub fn parse_corpus(contents: &str, source: &str) -> Result<Vec<RawDocument>, CorpusError> {
    let mut seen = HashSet::new();
    let mut docs = Vec::new();
    for (idx, line) in contents.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        if record.id.is_empty() {
            return Err(CorpusError::Malformed {
                line: line_no,
                message: "empty id".into(),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                doc_id: record.id,
            });
        }
        docs.push(RawDocument {
            doc_id: record.id,
            source: source.to_string(),
            text: record.text,
            metadata: record.metadata,
        });
    }
    Ok(docs)
}
