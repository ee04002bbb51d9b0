//! Acceptance criteria, run as a plain binary so every verdict is printed.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hoprag_core::config::{Mode, PipelineConfig};
use hoprag_core::corpus::{clean_text, tokenize, RawDocument, TokenSequence};
use hoprag_core::embedding::{
    embed_hashed, Embedder, EmbedderFileError, EmbeddingVector, ProjectionEmbedder,
};
use hoprag_core::fusion::{attention_weights, fuse, fuse_tempered};
use hoprag_core::generation::{
    ContextBlock, GenerationError, Generator, Prompt, RemoteConfig, RemoteGenerator,
};
use hoprag_core::metrics::{
    bleu, bleu_with_options, evaluate_records, ndcg_at_10, rouge_l, token_f1, JudgmentRecord,
    RelevanceJudgment, ResultRecord,
};
use hoprag_core::multihop::{run_multihop, HopConfig};
use hoprag_core::pipeline::{
    build_index, records_to_jsonl, BatchQuestion, Pipeline, RunRecord, StageTimings,
};
use hoprag_core::training::{
    retrieval_loss_gradient, total_loss, train, TrainConfig, TrainingExample,
};
use hoprag_core::vector_index::{IndexEntry, IndexError, RetrievalHit, VectorIndex};

type Check = Result<(), String>;
type Criterion = (&'static str, u64, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn seq(words: &[&str]) -> TokenSequence {
    TokenSequence::from_tokens(words.iter().copied())
}

fn random_unit(rng: &mut ChaCha8Rng, dims: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn metric_oracles() -> Check {
    let tol = 1e-6;
    let j = RelevanceJudgment {
        query_id: "q".into(),
        graded: vec![0, 1],
        ideal: vec![1, 0],
    };
    let expected = 1.0 / 3f64.log2();
    let got = ndcg_at_10(&j).map_err(|e| e.to_string())?;
    ensure!(
        close(got, expected, tol) && close(got, 0.630930, tol),
        "nDCG {got}"
    );

    let r = rouge_l(&seq(&["a", "b", "c", "d"]), &seq(&["a", "c"])).map_err(|e| e.to_string())?;
    ensure!(close(r, 0.5, tol), "ROUGE-L {r}");

    let f = token_f1(&seq(&["b", "c"]), &seq(&["a", "b"]));
    ensure!(
        close(f.f1, 0.5, tol) && close(f.precision, 0.5, tol) && close(f.recall, 0.5, tol),
        "F1 {f:?}"
    );

    let reference = seq(&["the", "cat", "sat", "on"]);
    let prediction = seq(&["the", "cat", "sat"]);
    let b = bleu(&reference, &prediction, 2).map_err(|e| e.to_string())?;
    ensure!(close(b.score, 1.0, tol), "BLEU {}", b.score);
    ensure!(
        b.precisions.len() == 2
            && close(b.precisions[0], 1.0, tol)
            && close(b.precisions[1], 1.0, tol),
        "precisions {:?}",
        b.precisions
    );
    let standard =
        bleu_with_options(&reference, &prediction, 2, true).map_err(|e| e.to_string())?;
    let bp = (1.0 - 4.0 / 3.0f64).exp();
    ensure!(
        close(standard.score, bp, tol) && close(bp, 0.7165, 1e-4),
        "standard BLEU {}",
        standard.score
    );

    let results = vec![
        ResultRecord {
            query_id: "a".into(),
            prediction: "x y".into(),
            ranked_chunk_ids: vec![],
        },
        ResultRecord {
            query_id: "b".into(),
            prediction: "z".into(),
            ranked_chunk_ids: vec![],
        },
    ];
    let judgments = vec![
        JudgmentRecord {
            query_id: "a".into(),
            reference: "x y".into(),
            relevant_chunk_grades: BTreeMap::new(),
        },
        JudgmentRecord {
            query_id: "b".into(),
            reference: "w".into(),
            relevant_chunk_grades: BTreeMap::new(),
        },
    ];
    let report = evaluate_records(&results, &judgments, false).map_err(|e| e.to_string())?;
    ensure!(close(report.f1, 0.5, tol), "macro F1 {}", report.f1);
    Ok(())
}

fn retrieval_exactness() -> Check {
    let dims = 48;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut index = VectorIndex::new(dims);
    let mut raw = Vec::new();
    for i in 0..1000 {
        // Every tenth entry duplicates an earlier vector so ties occur.
        let v = if i % 10 == 9 {
            raw[rng.random_range(0..raw.len())]
        } else {
            raw.len()
        };
        let values = if v == raw.len() {
            let values: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.0..1.0)).collect();
            raw.push(raw.len());
            values
        } else {
            index.entries()[v].vector.values().to_vec()
        };
        index
            .add(IndexEntry {
                chunk_id: format!("e{:04}", (i * 7919) % 1000),
                vector: EmbeddingVector::new(values),
                text: String::new(),
            })
            .map_err(|e| e.to_string())?;
    }
    for qi in 0..50 {
        let q: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.0..1.0)).collect();
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut oracle: Vec<(String, f64)> = index
            .entries()
            .iter()
            .map(|e| {
                let v = e.vector.values();
                let dot: f64 = q.iter().zip(v).map(|(a, b)| a * b).sum();
                let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                (e.chunk_id.clone(), (dot / (qn * vn)).clamp(-1.0, 1.0))
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let qv = EmbeddingVector::new(q);
        for k in [1, 10, 1000] {
            let hits = index.search_topk(&qv, k).map_err(|e| e.to_string())?;
            ensure!(hits.len() == k, "query {qi}: {} hits for k={k}", hits.len());
            for (rank, (hit, (id, score))) in hits.iter().zip(&oracle).enumerate() {
                ensure!(
                    hit.chunk_id == *id
                        && hit.score.to_bits() == score.to_bits()
                        && hit.rank == rank + 1,
                    "query {qi} k={k} rank {}: got {} {} want {id} {score}",
                    rank + 1,
                    hit.chunk_id,
                    hit.score
                );
            }
        }
    }
    Ok(())
}

fn fusion_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for case in 0..1000 {
        let n = rng.random_range(1..=12);
        let dims = rng.random_range(1..=16);
        let sims: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shift = rng.random_range(-50.0..50.0);
        let alphas = attention_weights(&sims).map_err(|e| e.to_string())?;
        let shifted: Vec<f64> = sims.iter().map(|s| s + shift).collect();
        let alphas_shifted = attention_weights(&shifted).map_err(|e| e.to_string())?;
        for (a, b) in alphas.iter().zip(&alphas_shifted) {
            ensure!(
                close(*a, *b, 1e-12),
                "case {case}: shift changed {a} to {b}"
            );
        }
        let total: f64 = alphas.iter().sum();
        ensure!(
            close(total, 1.0, 1e-9),
            "case {case}: weights sum to {total}"
        );

        let hits: Vec<RetrievalHit> = sims
            .iter()
            .enumerate()
            .map(|(i, &s)| RetrievalHit {
                chunk_id: format!("c{i}"),
                score: s,
                rank: i + 1,
            })
            .collect();
        let vectors: Vec<EmbeddingVector> = (0..n)
            .map(|_| EmbeddingVector::new(random_unit(&mut rng, dims)))
            .collect();
        let tau = rng.random_range(0.1..4.0);
        let fused = fuse_tempered(&hits, &vectors, tau).map_err(|e| e.to_string())?;
        for j in 0..dims {
            let lo = vectors
                .iter()
                .map(|v| v.values()[j])
                .fold(f64::INFINITY, f64::min);
            let hi = vectors
                .iter()
                .map(|v| v.values()[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let x = fused.vector.values()[j];
            ensure!(
                x >= lo - 1e-12 && x <= hi + 1e-12,
                "case {case}: coord {j} = {x} outside [{lo}, {hi}]"
            );
        }

        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let p_hits: Vec<RetrievalHit> = perm.iter().map(|&i| hits[i].clone()).collect();
        let p_vectors: Vec<EmbeddingVector> = perm.iter().map(|&i| vectors[i].clone()).collect();
        let p_fused = fuse_tempered(&p_hits, &p_vectors, tau).map_err(|e| e.to_string())?;
        for (slot, &i) in perm.iter().enumerate() {
            ensure!(
                p_fused.weights[slot].0 == fused.weights[i].0
                    && close(p_fused.weights[slot].1, fused.weights[i].1, 1e-12),
                "case {case}: weight of {} moved under permutation",
                fused.weights[i].0
            );
        }
        for (a, b) in p_fused.vector.values().iter().zip(fused.vector.values()) {
            ensure!(
                close(*a, *b, 1e-12),
                "case {case}: fused vector changed under permutation"
            );
        }
    }
    Ok(())
}

fn fnv1a(token: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Retrieval loss recomputed from scratch with dense matrices.
fn oracle_loss(
    w: &[f64],
    d: usize,
    v: usize,
    query: &[String],
    candidates: &[Vec<f64>],
    truth: usize,
) -> f64 {
    let mut b = vec![0.0; v];
    for t in query {
        b[(fnv1a(t) % v as u64) as usize] += 1.0;
    }
    let u: Vec<f64> = (0..d)
        .map(|r| (0..v).map(|c| w[r * v + c] * b[c]).sum())
        .collect();
    let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sims: Vec<f64> = candidates
        .iter()
        .map(|c| {
            let cn = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / (un * cn)
        })
        .collect();
    let lse = sims.iter().map(|s| s.exp()).sum::<f64>().ln();
    lse - sims[truth]
}

fn gradient_check() -> Check {
    let (d, v) = (8, 32);
    let eps = 1e-5;
    let words = [
        "alpha", "beta", "gamma", "delta", "omega", "tax", "audit", "ledger", "asset", "yield",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for instance in 0..10 {
        let k = rng.random_range(2..=5);
        let candidates: Vec<Vec<f64>> = (0..k).map(|_| random_unit(&mut rng, d)).collect();
        let mut index = VectorIndex::new(d);
        for (i, c) in candidates.iter().enumerate() {
            index
                .add(IndexEntry {
                    chunk_id: format!("c{i}"),
                    vector: EmbeddingVector::new(c.clone()),
                    text: String::new(),
                })
                .map_err(|e| e.to_string())?;
        }
        let len = rng.random_range(2..=6);
        let query: Vec<String> = (0..len)
            .map(|_| words[rng.random_range(0..words.len())].to_string())
            .collect();
        let truth = rng.random_range(0..k);
        let example = TrainingExample {
            query: TokenSequence::from_tokens(query.iter().map(String::as_str)),
            true_chunk_id: format!("c{truth}"),
            candidate_chunk_ids: (0..k).map(|i| format!("c{i}")).collect(),
            target_token_probs: None,
        };
        let embedder = ProjectionEmbedder::random(d, v, 100 + instance);
        let analytic =
            retrieval_loss_gradient(&embedder, &example, &index).map_err(|e| e.to_string())?;
        let w = embedder.weights().to_vec();
        let base = oracle_loss(&w, d, v, &query, &candidates, truth);
        ensure!(
            close(analytic.loss, base, 1e-12),
            "instance {instance}: loss {} vs oracle {base}",
            analytic.loss
        );
        let dense = analytic.to_dense(d, v);
        let mut cols: Vec<usize> = query
            .iter()
            .map(|t| (fnv1a(t) % v as u64) as usize)
            .collect();
        cols.sort_unstable();
        cols.dedup();
        for _ in 0..20 {
            let coord = rng.random_range(0..d) * v + cols[rng.random_range(0..cols.len())];
            let mut plus = w.clone();
            plus[coord] += eps;
            let mut minus = w.clone();
            minus[coord] -= eps;
            let numeric = (oracle_loss(&plus, d, v, &query, &candidates, truth)
                - oracle_loss(&minus, d, v, &query, &candidates, truth))
                / (2.0 * eps);
            let got = dense[coord];
            let scale = got.abs().max(numeric.abs());
            let rel = if scale < 1e-9 {
                0.0
            } else {
                (got - numeric).abs() / scale
            };
            worst = worst.max(rel);
            ensure!(
                rel <= 1e-4,
                "instance {instance} coord {coord}: analytic {got} numeric {numeric} rel {rel}"
            );
        }
    }
    println!("    worst relative error {worst:.2e}");
    Ok(())
}

fn planted_training() -> Check {
    let dims = 32;
    let fillers = [
        "the", "of", "revenue", "quarter", "report", "fiscal", "net", "total",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut index = VectorIndex::new(dims);
    for i in 0..50 {
        let text = format!("rare{i} {}", fillers[rng.random_range(0..fillers.len())]);
        let tokens = tokenize(&clean_text(&text));
        index
            .add(IndexEntry {
                chunk_id: format!("c{i:02}"),
                vector: embed_hashed(&tokens, dims, 0),
                text,
            })
            .map_err(|e| e.to_string())?;
    }
    let examples: Vec<TrainingExample> = (0..50)
        .map(|i| {
            let query = format!("rare{i} {}", fillers[rng.random_range(0..fillers.len())]);
            let mut candidates = vec![format!("c{i:02}")];
            while candidates.len() < 3 {
                let id = format!("c{:02}", rng.random_range(0..50));
                if !candidates.contains(&id) {
                    candidates.push(id);
                }
            }
            TrainingExample {
                query: tokenize(&query),
                true_chunk_id: format!("c{i:02}"),
                candidate_chunk_ids: candidates,
                target_token_probs: Some(vec![0.5, 0.25, 0.8]),
            }
        })
        .collect();
    let config = TrainConfig {
        epochs: 30,
        learning_rate: 5.0,
        lambda_retrieval: 1.0,
        lambda_generation: 0.3,
        batch_size: 8,
        rng_seed: 0,
    };
    let (_, reports) = train(
        &index,
        &examples,
        &config,
        ProjectionEmbedder::random(dims, 1024, 3),
    )
    .map_err(|e| e.to_string())?;
    ensure!(reports.len() == 30, "{} reports", reports.len());
    for r in &reports {
        let expected = total_loss(
            r.retrieval,
            r.generation,
            r.lambda_retrieval,
            r.lambda_generation,
        );
        ensure!(
            r.total.to_bits() == expected.to_bits(),
            "epoch {}: total {} vs {}",
            r.epoch,
            r.total,
            expected
        );
        ensure!(
            r.total
                == config.lambda_retrieval * r.retrieval + config.lambda_generation * r.generation,
            "epoch {}: weighted sum mismatch",
            r.epoch
        );
    }
    let (first, last) = (reports[0].retrieval, reports[29].retrieval);
    println!(
        "    L_retrieval {first:.4} -> {last:.4} (ratio {:.3})",
        last / first
    );
    ensure!(
        last < 0.5 * first,
        "final {last} is not below half of {first}"
    );
    Ok(())
}

fn planted_two_hop() -> (VectorIndex, EmbeddingVector) {
    let dims = 256;
    let mut index = VectorIndex::new(dims);
    for (id, text) in [
        ("a", "zorbix quantacorp"),
        ("b", "quantacorp vossberg"),
        ("c", "lumen drift"),
        ("d", "harbor tide"),
    ] {
        index
            .add(IndexEntry {
                chunk_id: id.into(),
                vector: embed_hashed(&tokenize(text), dims, 0),
                text: text.into(),
            })
            .unwrap();
    }
    (index, embed_hashed(&tokenize("zorbix"), dims, 0))
}

fn brute_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn multihop_behavior() -> Check {
    let (index, q) = planted_two_hop();
    let hit0 = index.search_topk(&q, 1).map_err(|e| e.to_string())?;
    ensure!(
        hit0.len() == 1 && hit0[0].chunk_id == "a",
        "hop-0 top-1 {:?}",
        hit0
    );
    let vectors = vec![index.vector("a").map_err(|e| e.to_string())?.clone()];
    let initial = fuse(&hit0, &vectors).map_err(|e| e.to_string())?;

    let zero = HopConfig {
        hops: 0,
        ..HopConfig::default()
    };
    let state = run_multihop(&q, initial.clone(), &index, &zero).map_err(|e| e.to_string())?;
    ensure!(state.trace.is_empty(), "T=0 produced a trace");
    let same = state
        .fused
        .values()
        .iter()
        .zip(initial.vector.values())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    ensure!(same, "T=0 fused differs from D_agg");

    let config = HopConfig {
        hops: 1,
        per_hop_k: 2,
        ..HopConfig::default()
    };
    let state = run_multihop(&q, initial.clone(), &index, &config).map_err(|e| e.to_string())?;
    let hop1: Vec<&str> = state.trace[0]
        .hits
        .iter()
        .map(|h| h.chunk_id.as_str())
        .collect();
    ensure!(
        hop1.contains(&"b"),
        "hop-1 hits {hop1:?} lack the bridge chunk"
    );

    // Brute-force the refined query and its two best chunks.
    let refined: Vec<f64> = {
        let mixed: Vec<f64> = q
            .values()
            .iter()
            .zip(initial.vector.values())
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect();
        let n = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
        mixed.iter().map(|x| x / n).collect()
    };
    let mut sims: Vec<(String, f64)> = index
        .entries()
        .iter()
        .map(|e| (e.chunk_id.clone(), brute_cos(&refined, e.vector.values())))
        .collect();
    sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    let top2: Vec<&str> = sims.iter().take(2).map(|(id, _)| id.as_str()).collect();
    ensure!(top2 == hop1, "brute-force top-2 {top2:?} vs hop-1 {hop1:?}");
    Ok(())
}

const ENTITIES: [&str; 10] = [
    "orvane", "telquist", "brimora", "caldex", "mirth", "zephlon", "quorra", "helvik", "sandro",
    "pellum",
];
const ATTRIBUTES: [(&str, &str); 10] = [
    ("auditor", "firm"),
    ("headquarters", "city"),
    ("ticker", "sym"),
    ("founder", "person"),
    ("lender", "bank"),
    ("regulator", "agency"),
    ("custodian", "trust"),
    ("exchange", "venue"),
    ("currency", "coin"),
    ("insurer", "mutual"),
];

/// One fact sentence per document plus a shared distractor sentence.
fn qa_corpus() -> (Vec<RawDocument>, Vec<BatchQuestion>, Vec<JudgmentRecord>) {
    let mut docs = Vec::new();
    let mut questions = Vec::new();
    let mut judgments = Vec::new();
    for (e, entity) in ENTITIES.iter().enumerate() {
        for (a, (attr, kind)) in ATTRIBUTES.iter().enumerate() {
            let value = format!("{kind}{}", e * 10 + a);
            let id = format!("{entity}-{attr}");
            let fact = format!("the {attr} of {entity} is {value}.");
            docs.push(RawDocument::new(
                id.clone(),
                format!("{fact} {entity} filed its annual report on time."),
            ));
            questions.push(BatchQuestion {
                query_id: id.clone(),
                question: format!("who is the {attr} of {entity} ?"),
            });
            judgments.push(JudgmentRecord {
                query_id: id.clone(),
                reference: fact,
                relevant_chunk_grades: BTreeMap::from([(format!("{id}#0"), 1)]),
            });
        }
    }
    (docs, questions, judgments)
}

fn run_mode(
    mode: Mode,
    index: &VectorIndex,
    questions: &[BatchQuestion],
    judgments: &[JudgmentRecord],
) -> Result<f64, String> {
    let config = PipelineConfig {
        dims: index.dims(),
        mode,
        ..PipelineConfig::default()
    };
    let embedder = Embedder::Hashed {
        dims: config.dims,
        seed: config.seed,
    };
    let generator = hoprag_core::generation::ExtractiveGenerator;
    let pipeline =
        Pipeline::new(index, &embedder, &config, &generator).map_err(|e| e.to_string())?;
    let mut results = Vec::new();
    for outcome in pipeline.answer_batch(questions) {
        let record = outcome.map_err(|e| e.to_string())?.record;
        results.push(ResultRecord {
            query_id: record.query_id,
            prediction: record.answer,
            ranked_chunk_ids: record.ranked_chunk_ids,
        });
    }
    Ok(evaluate_records(&results, judgments, false)
        .map_err(|e| e.to_string())?
        .f1)
}

fn ablation_ordering() -> Check {
    let (docs, questions, judgments) = qa_corpus();
    ensure!(questions.len() == 100, "{} questions", questions.len());
    let config = PipelineConfig::default();
    let embedder = Embedder::Hashed {
        dims: config.dims,
        seed: config.seed,
    };
    let (index, _) = build_index(&docs, &config, &embedder).map_err(|e| e.to_string())?;
    let full = run_mode(Mode::Full, &index, &questions, &judgments)?;
    let retrieval = run_mode(Mode::RetrievalOnly, &index, &questions, &judgments)?;
    let generation = run_mode(Mode::GenerationOnly, &index, &questions, &judgments)?;
    println!(
        "    macro F1 full {full:.4} retrieval_only {retrieval:.4} generation_only {generation:.4}"
    );
    ensure!(
        full > retrieval && full > generation,
        "full mode does not dominate"
    );
    Ok(())
}

fn strip_timings(records: &mut [RunRecord]) {
    for r in records {
        r.timings_ms = StageTimings::default();
    }
}

fn end_to_end_determinism() -> Check {
    let (docs, questions, _) = qa_corpus();
    let config = PipelineConfig::default();
    let embedder = Embedder::Hashed {
        dims: config.dims,
        seed: config.seed,
    };
    let mut outputs = Vec::new();
    let mut index_bytes = Vec::new();
    for _ in 0..2 {
        let (index, _) = build_index(&docs, &config, &embedder).map_err(|e| e.to_string())?;
        index_bytes.push(index.to_bytes());
        let generator = hoprag_core::generation::ExtractiveGenerator;
        let pipeline =
            Pipeline::new(&index, &embedder, &config, &generator).map_err(|e| e.to_string())?;
        let mut records = pipeline
            .answer_batch(&questions)
            .into_iter()
            .map(|o| o.map(|o| o.record))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        strip_timings(&mut records);
        for r in &records {
            for c in &r.citations {
                ensure!(index.get(c).is_some(), "citation {c} not in the index");
            }
        }
        outputs.push(records_to_jsonl(&records));
    }
    ensure!(
        index_bytes[0] == index_bytes[1],
        "index bytes differ between runs"
    );
    ensure!(
        outputs[0] == outputs[1],
        "batch outputs differ between runs"
    );
    Ok(())
}

fn persistence() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let dims = 24;
    let mut index = VectorIndex::new(dims);
    for i in 0..100 {
        index
            .add(IndexEntry {
                chunk_id: format!("chunk-{i}"),
                vector: EmbeddingVector::new(random_unit(&mut rng, dims)),
                text: format!("text {i} ünïcode"),
            })
            .map_err(|e| e.to_string())?;
    }
    let path = dir.path().join("index.bin");
    index.save(&path).map_err(|e| e.to_string())?;
    let loaded = VectorIndex::load(&path).map_err(|e| e.to_string())?;
    for _ in 0..10 {
        let q = EmbeddingVector::new(random_unit(&mut rng, dims));
        let a = index.search_topk(&q, 100).map_err(|e| e.to_string())?;
        let b = loaded.search_topk(&q, 100).map_err(|e| e.to_string())?;
        ensure!(
            a.iter()
                .zip(&b)
                .all(|(x, y)| x.chunk_id == y.chunk_id && x.score.to_bits() == y.score.to_bits()),
            "reloaded index scores differ"
        );
    }
    let bytes = index.to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    ensure!(
        matches!(VectorIndex::from_bytes(&bad), Err(IndexError::BadMagic)),
        "bad magic accepted"
    );
    let err = VectorIndex::from_bytes(&bad).unwrap_err().to_string();
    ensure!(err == "bad magic", "bad magic message {err:?}");
    ensure!(
        matches!(
            VectorIndex::from_bytes(&bytes[..bytes.len() / 2]),
            Err(IndexError::Truncated)
        ),
        "truncated index accepted"
    );
    for step in 1..64 {
        let mut flipped = bytes.clone();
        flipped[step * (bytes.len() - 1) / 64] ^= 0x5a;
        ensure!(
            VectorIndex::from_bytes(&flipped).is_err(),
            "flip at step {step} accepted"
        );
    }
    let mut flipped = bytes.clone();
    let last_vector_byte = bytes.len() - 5;
    flipped[last_vector_byte] ^= 0x40;
    ensure!(
        matches!(
            VectorIndex::from_bytes(&flipped),
            Err(IndexError::Checksum { .. })
        ),
        "corrupted index accepted: {:?}",
        VectorIndex::from_bytes(&flipped).err()
    );

    let embedder = ProjectionEmbedder::random(8, 64, 5);
    let epath = dir.path().join("embedder.bin");
    embedder.save(&epath).map_err(|e| e.to_string())?;
    let reloaded = ProjectionEmbedder::load(&epath).map_err(|e| e.to_string())?;
    for text in ["net revenue rose", "audit of the ledger", "x"] {
        let tokens = tokenize(text);
        let a = embedder.embed(&tokens);
        let b = reloaded.embed(&tokens);
        ensure!(
            a.values()
                .iter()
                .zip(b.values())
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            "reloaded embedder differs on {text:?}"
        );
    }
    let ebytes = embedder.to_bytes();
    let mut ebad = ebytes.clone();
    ebad[1] = b'?';
    ensure!(
        matches!(
            ProjectionEmbedder::from_bytes(&ebad),
            Err(EmbedderFileError::BadMagic)
        ),
        "embedder bad magic accepted"
    );
    ensure!(
        matches!(
            ProjectionEmbedder::from_bytes(&ebytes[..ebytes.len() - 3]),
            Err(EmbedderFileError::Truncated { .. })
        ),
        "truncated embedder accepted"
    );
    Ok(())
}

#[derive(Clone, Copy)]
enum MockBehavior {
    Answer,
    Fail,
    Stall(Duration),
}

fn handle(mut stream: TcpStream, behavior: MockBehavior) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut length = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        if line == "\r\n" {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; length];
    let _ = reader.read_exact(&mut body);
    let (status, payload) = match behavior {
        MockBehavior::Answer => (
            "200 OK",
            r#"{"choices":[{"message":{"role":"assistant","content":"answer [1]"}}]}"#.to_string(),
        ),
        MockBehavior::Fail => ("500 Internal Server Error", "boom".to_string()),
        MockBehavior::Stall(delay) => {
            thread::sleep(delay);
            (
                "200 OK",
                r#"{"choices":[{"message":{"content":"late"}}]}"#.to_string(),
            )
        }
    };
    let response = format!(
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    let _ = stream.write_all(response.as_bytes());
}

fn mock_server(behavior: MockBehavior) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let count = Arc::new(AtomicUsize::new(0));
    let seen = Arc::clone(&count);
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            seen.fetch_add(1, Ordering::SeqCst);
            thread::spawn(move || handle(stream, behavior));
        }
    });
    (url, count)
}

fn remote_prompt() -> Prompt {
    Prompt {
        system: "Answer from context.".into(),
        context_blocks: vec![
            ContextBlock {
                chunk_id: "doc#0".into(),
                text: "first passage".into(),
                weight: 0.6,
            },
            ContextBlock {
                chunk_id: "doc#1".into(),
                text: "second passage".into(),
                weight: 0.4,
            },
        ],
        question: "what?".into(),
    }
}

fn remote_config(url: String) -> RemoteConfig {
    RemoteConfig {
        base_url: url,
        model: "mock".into(),
        ..RemoteConfig::default()
    }
}

fn remote_contract() -> Check {
    let (url, count) = mock_server(MockBehavior::Answer);
    let generator = RemoteGenerator::new(remote_config(url)).map_err(|e| e.to_string())?;
    let answer = generator
        .generate(&remote_prompt())
        .map_err(|e| e.to_string())?;
    ensure!(answer.text == "answer [1]", "text {:?}", answer.text);
    ensure!(
        answer.citations == vec!["doc#0".to_string()],
        "citations {:?}",
        answer.citations
    );
    ensure!(
        count.load(Ordering::SeqCst) == 1,
        "success took {} requests",
        count.load(Ordering::SeqCst)
    );

    let (url, count) = mock_server(MockBehavior::Fail);
    let generator = RemoteGenerator::new(remote_config(url)).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let err = generator.generate(&remote_prompt()).unwrap_err();
    let waited = start.elapsed();
    ensure!(
        matches!(err, GenerationError::Status { status: 500, .. }),
        "error {err}"
    );
    ensure!(
        count.load(Ordering::SeqCst) == 3,
        "{} requests for 2 retries",
        count.load(Ordering::SeqCst)
    );
    ensure!(
        waited >= Duration::from_secs(3),
        "backoff too short: {waited:?}"
    );

    let (url, count) = mock_server(MockBehavior::Stall(Duration::from_secs(3)));
    let generator = RemoteGenerator::new(RemoteConfig {
        timeout: Duration::from_millis(300),
        ..remote_config(url)
    })
    .map_err(|e| e.to_string())?;
    let err = generator.generate(&remote_prompt()).unwrap_err();
    ensure!(matches!(err, GenerationError::Timeout(_)), "error {err}");
    ensure!(count.load(Ordering::SeqCst) == 1, "timeout was retried");
    Ok(())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("metric oracle suite", 5, metric_oracles),
        ("retrieval exactness", 10, retrieval_exactness),
        ("softmax and fusion properties", 30, fusion_properties),
        ("retrieval loss gradient check", 30, gradient_check),
        (
            "planted training halves retrieval loss",
            60,
            planted_training,
        ),
        ("multi-hop bridge and base case", 5, multihop_behavior),
        ("ablation ordering", 60, ablation_ordering),
        ("end-to-end determinism", 60, end_to_end_determinism),
        ("persistence round trips", 30, persistence),
        ("remote backend contract", 10, remote_contract),
    ];
    let mut failures = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|()| {
            if elapsed > Duration::from_secs(limit) {
                Err(format!("took {elapsed:?}, limit {limit} s"))
            } else {
                Ok(())
            }
        });
        match outcome {
            Ok(()) => println!("PASS  {name}  ({:.2} s)", elapsed.as_secs_f64()),
            Err(msg) => {
                failures += 1;
                println!("FAIL  {name}  ({:.2} s): {msg}", elapsed.as_secs_f64());
            }
        }
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
