//! Evaluation metrics: nDCG@10, BLEU, ROUGE-L and token F1, plus a run
//! evaluator that macro-averages them over a results file.
//!
//! BLEU is the plain geometric mean of clipped n-gram precisions; the
//! brevity penalty is opt-in. ROUGE-L is the recall form
//! `LCS / len(reference)`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{clean_text, tokenize, TokenSequence};

pub const NDCG_CUTOFF: usize = 10;
pub const DEFAULT_BLEU_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("negative relevance grade {0}")]
    NegativeGrade(i64),
    #[error("ROUGE-L needs a non-empty reference")]
    EmptyReference,
    #[error("BLEU order must be ≥ 1")]
    ZeroOrder,
    #[error("no judgment for query {0:?}")]
    MissingJudgment(String),
    #[error("malformed {file} record on line {line}: {message}")]
    Malformed {
        file: &'static str,
        line: usize,
        message: String,
    },
    #[error("duplicate query id {query_id:?} in {file} on line {line}")]
    DuplicateQuery {
        file: &'static str,
        line: usize,
        query_id: String,
    },
    #[error("results file is empty")]
    EmptyRun,
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceJudgment {
    pub query_id: String,
    /// Grades of the system ranking, top first.
    pub graded: Vec<i64>,
    /// Every known grade for the query.
    pub ideal: Vec<i64>,
}

fn dcg(grades: impl Iterator<Item = i64>) -> f64 {
    grades
        .take(NDCG_CUTOFF)
        .enumerate()
        .map(|(i, rel)| (2f64.powi(rel as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// `DCG@10 / IDCG@10`, or 0 when the ideal gain is zero.
pub fn ndcg_at_10(judgment: &RelevanceJudgment) -> Result<f64, MetricsError> {
    if let Some(&bad) = judgment
        .graded
        .iter()
        .chain(&judgment.ideal)
        .find(|g| **g < 0)
    {
        return Err(MetricsError::NegativeGrade(bad));
    }
    let mut ideal = judgment.ideal.clone();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let z = dcg(ideal.into_iter());
    if z == 0.0 {
        return Ok(0.0);
    }
    Ok((dcg(judgment.graded.iter().copied()) / z).min(1.0))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        *counts.entry(window).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
}

/// Clipped n-gram precisions `p_1..p_N` and `exp(mean(log p_n))`.
///
/// `N` is capped at the prediction length; any zero precision gives 0.
pub fn bleu(
    reference: &TokenSequence,
    prediction: &TokenSequence,
    order: usize,
) -> Result<BleuScore, MetricsError> {
    bleu_with_options(reference, prediction, order, false)
}

pub fn bleu_with_options(
    reference: &TokenSequence,
    prediction: &TokenSequence,
    order: usize,
    brevity_penalty: bool,
) -> Result<BleuScore, MetricsError> {
    if order == 0 {
        return Err(MetricsError::ZeroOrder);
    }
    if prediction.is_empty() {
        return Ok(BleuScore {
            score: 0.0,
            precisions: vec![0.0; order],
            brevity_penalty: if brevity_penalty { 0.0 } else { 1.0 },
        });
    }
    let n_max = order.min(prediction.len());
    let precisions: Vec<f64> = (1..=n_max)
        .map(|n| {
            let pred = ngram_counts(prediction.tokens(), n);
            let refs = ngram_counts(reference.tokens(), n);
            let clipped: usize = pred
                .iter()
                .map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0)))
                .sum();
            clipped as f64 / (prediction.len() + 1 - n) as f64
        })
        .collect();
    let bp = if !brevity_penalty || prediction.len() > reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / prediction.len() as f64).exp()
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        bp * (precisions.iter().map(|p| p.ln()).sum::<f64>() / n_max as f64).exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty: bp,
    })
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(reference: &TokenSequence, prediction: &TokenSequence) -> Result<f64, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    Ok(lcs_len(reference.tokens(), prediction.tokens()) as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F1Score {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Multiset token overlap F1.
pub fn token_f1(reference: &TokenSequence, prediction: &TokenSequence) -> F1Score {
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in reference.tokens() {
        *ref_counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in prediction.tokens() {
        if let Some(c) = ref_counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(overlap, prediction.len());
    let recall = ratio(overlap, reference.len());
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    F1Score {
        f1,
        precision,
        recall,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub ndcg_at_10: f64,
    pub bleu: f64,
    pub bleu_ngram_precisions: Vec<f64>,
    pub rouge_l: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Macro averages over queries, with the per-query rows kept as the
/// breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub queries: usize,
    pub ndcg_at_10: f64,
    pub bleu: f64,
    pub bleu_ngram_precisions: Vec<f64>,
    pub rouge_l: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub standard_bleu: bool,
    pub per_query: Vec<QueryMetrics>,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "queries     {}", self.queries);
        let _ = writeln!(out, "nDCG@10     {:.4}", self.ndcg_at_10);
        let _ = writeln!(
            out,
            "BLEU        {:.4}{}",
            self.bleu,
            if self.standard_bleu {
                " (with brevity penalty)"
            } else {
                ""
            }
        );
        for (i, p) in self.bleu_ngram_precisions.iter().enumerate() {
            let _ = writeln!(out, "  p_{}       {:.4}", i + 1, p);
        }
        let _ = writeln!(out, "ROUGE-L     {:.4}", self.rouge_l);
        let _ = writeln!(out, "F1          {:.4}", self.f1);
        let _ = writeln!(out, "  precision {:.4}", self.precision);
        let _ = writeln!(out, "  recall    {:.4}", self.recall);
        out
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct ResultRecord {
    pub query_id: String,
    #[serde(alias = "answer")]
    pub prediction: String,
    #[serde(default)]
    pub ranked_chunk_ids: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct JudgmentRecord {
    pub query_id: String,
    pub reference: String,
    #[serde(default)]
    pub relevant_chunk_grades: BTreeMap<String, i64>,
}

fn parse_lines<T: for<'de> Deserialize<'de>>(
    contents: &str,
    file: &'static str,
) -> Result<Vec<(usize, T)>, MetricsError> {
    contents
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|r| (i + 1, r))
                .map_err(|e| MetricsError::Malformed {
                    file,
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

fn text_tokens(text: &str) -> TokenSequence {
    tokenize(&clean_text(text))
}

pub fn score_query(
    result: &ResultRecord,
    judgment: &JudgmentRecord,
    standard_bleu: bool,
) -> Result<QueryMetrics, MetricsError> {
    let reference = text_tokens(&judgment.reference);
    let prediction = text_tokens(&result.prediction);
    let graded = result
        .ranked_chunk_ids
        .iter()
        .take(NDCG_CUTOFF)
        .map(|id| judgment.relevant_chunk_grades.get(id).copied().unwrap_or(0))
        .collect();
    let ndcg = ndcg_at_10(&RelevanceJudgment {
        query_id: result.query_id.clone(),
        graded,
        ideal: judgment.relevant_chunk_grades.values().copied().collect(),
    })?;
    let b = bleu_with_options(&reference, &prediction, DEFAULT_BLEU_ORDER, standard_bleu)?;
    let mut precisions = b.precisions.clone();
    precisions.resize(DEFAULT_BLEU_ORDER, 0.0);
    let f = token_f1(&reference, &prediction);
    Ok(QueryMetrics {
        query_id: result.query_id.clone(),
        ndcg_at_10: ndcg,
        bleu: b.score,
        bleu_ngram_precisions: precisions,
        rouge_l: rouge_l(&reference, &prediction)?,
        f1: f.f1,
        precision: f.precision,
        recall: f.recall,
    })
}

pub fn evaluate_records(
    results: &[ResultRecord],
    judgments: &[JudgmentRecord],
    standard_bleu: bool,
) -> Result<MetricsReport, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    let by_id: HashMap<&str, &JudgmentRecord> =
        judgments.iter().map(|j| (j.query_id.as_str(), j)).collect();
    let per_query = results
        .iter()
        .map(|r| {
            let j = by_id
                .get(r.query_id.as_str())
                .ok_or_else(|| MetricsError::MissingJudgment(r.query_id.clone()))?;
            score_query(r, j, standard_bleu)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let n = per_query.len() as f64;
    let mean = |f: &dyn Fn(&QueryMetrics) -> f64| per_query.iter().map(f).sum::<f64>() / n;
    let precisions = (0..DEFAULT_BLEU_ORDER)
        .map(|i| mean(&|q| q.bleu_ngram_precisions[i]))
        .collect();
    Ok(MetricsReport {
        queries: per_query.len(),
        ndcg_at_10: mean(&|q| q.ndcg_at_10),
        bleu: mean(&|q| q.bleu),
        bleu_ngram_precisions: precisions,
        rouge_l: mean(&|q| q.rouge_l),
        f1: mean(&|q| q.f1),
        precision: mean(&|q| q.precision),
        recall: mean(&|q| q.recall),
        standard_bleu,
        per_query,
    })
}

pub fn parse_results(contents: &str) -> Result<Vec<ResultRecord>, MetricsError> {
    let mut seen = std::collections::HashSet::new();
    parse_lines::<ResultRecord>(contents, "results")?
        .into_iter()
        .map(|(line, r)| {
            if !seen.insert(r.query_id.clone()) {
                return Err(MetricsError::DuplicateQuery {
                    file: "results",
                    line,
                    query_id: r.query_id,
                });
            }
            Ok(r)
        })
        .collect()
}

pub fn parse_judgments(contents: &str) -> Result<Vec<JudgmentRecord>, MetricsError> {
    let mut seen = std::collections::HashSet::new();
    parse_lines::<JudgmentRecord>(contents, "judgments")?
        .into_iter()
        .map(|(line, j)| {
            if !seen.insert(j.query_id.clone()) {
                return Err(MetricsError::DuplicateQuery {
                    file: "judgments",
                    line,
                    query_id: j.query_id,
                });
            }
            if let Some((_, &g)) = j.relevant_chunk_grades.iter().find(|(_, g)| **g < 0) {
                return Err(MetricsError::NegativeGrade(g));
            }
            Ok(j)
        })
        .collect()
}

pub fn evaluate_run(
    results: &Path,
    judgments: &Path,
    standard_bleu: bool,
) -> Result<MetricsReport, MetricsError> {
    let read = |p: &Path| {
        fs::read_to_string(p).map_err(|source| MetricsError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    let results = parse_results(&read(results)?)?;
    let judgments = parse_judgments(&read(judgments)?)?;
    evaluate_records(&results, &judgments, standard_bleu)
}
