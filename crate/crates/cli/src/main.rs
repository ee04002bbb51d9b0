use std::fmt::Display;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hoprag_core::config::{load_config, process_env, ConfigError, PipelineConfig};
use hoprag_core::embedding::{Embedder, ProjectionEmbedder};
use hoprag_core::metrics::evaluate_run;
use hoprag_core::pipeline::{
    ingest_command, load_questions, make_generator, records_to_jsonl, trace_to_jsonl,
    BatchQuestion, Pipeline, PipelineError,
};
use hoprag_core::training::{load_examples, train, TrainConfig};
use hoprag_core::vector_index::VectorIndex;

const USAGE: u8 = 1;
const DATA: u8 = 2;
const BACKEND: u8 = 3;

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn data(e: impl Display) -> Self {
        Self {
            code: DATA,
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self {
            code: USAGE,
            message: e.to_string(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Self {
            code: if e.is_backend() { BACKEND } else { DATA },
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(
    name = "hoprag",
    version,
    about = "Multi-hop retrieval-augmented question answering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk, embed and index a corpus file.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print the top-k hits for a question.
    Query {
        #[arg(long)]
        question: String,
        /// Print chunk id, score and fusion weight per hit.
        #[arg(long)]
        explain: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run the full pipeline on one question or a batch file.
    Answer {
        #[arg(
            long,
            conflicts_with = "questions",
            required_unless_present = "questions"
        )]
        question: Option<String>,
        /// Newline-delimited {query_id, question} records.
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dump_trace: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit a query projection against a fixed index.
    Train {
        #[arg(long)]
        examples: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_r: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_g: f64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        /// Start from this embedder instead of a seeded random one.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "losses.tsv")]
        losses: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a results file against judgments.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        judgments: PathBuf,
        /// Apply the brevity penalty.
        #[arg(long)]
        standard_bleu: bool,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "index.bin")]
    index: PathBuf,
    /// Trained query embedder; hashed embeddings are used without it.
    #[arg(long)]
    embedder: Option<PathBuf>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    hops: Option<String>,
    #[arg(long)]
    per_hop_k: Option<String>,
    #[arg(long)]
    alpha_mix: Option<String>,
    #[arg(long)]
    temperature: Option<String>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    dims: Option<String>,
    #[arg(long)]
    vocab_buckets: Option<String>,
    #[arg(long)]
    chunk_size: Option<String>,
    #[arg(long)]
    overlap: Option<String>,
    #[arg(long)]
    max_chunks: Option<String>,
    #[arg(long)]
    llm_url: Option<String>,
    #[arg(long)]
    llm_model: Option<String>,
}

impl Common {
    fn config(&self) -> CliResult<PipelineConfig> {
        let pairs = [
            ("k", &self.k),
            ("hops", &self.hops),
            ("per_hop_k", &self.per_hop_k),
            ("alpha_mix", &self.alpha_mix),
            ("temperature", &self.temperature),
            ("backend", &self.backend),
            ("mode", &self.mode),
            ("seed", &self.seed),
            ("dims", &self.dims),
            ("vocab_buckets", &self.vocab_buckets),
            ("chunk_size", &self.chunk_size),
            ("overlap", &self.overlap),
            ("max_chunks", &self.max_chunks),
            ("llm_base_url", &self.llm_url),
            ("llm_model", &self.llm_model),
        ];
        let flags: Vec<(&str, String)> = pairs
            .into_iter()
            .filter_map(|(k, v)| v.clone().map(|v| (k, v)))
            .collect();
        Ok(load_config(self.config.as_deref(), &process_env(), &flags)?)
    }

    fn embedder(&self, config: &PipelineConfig) -> CliResult<Embedder> {
        match &self.embedder {
            Some(path) => Ok(Embedder::Projected(
                ProjectionEmbedder::load(path).map_err(Failure::data)?,
            )),
            None => Ok(Embedder::Hashed {
                dims: config.dims,
                seed: config.seed,
            }),
        }
    }

    fn index(&self) -> CliResult<VectorIndex> {
        VectorIndex::load(&self.index).map_err(Failure::data)
    }
}

fn write_output(path: Option<&Path>, contents: &str) -> CliResult {
    match path {
        Some(p) => fs::write(p, contents)
            .map_err(|e| Failure::data(format!("cannot write {}: {e}", p.display()))),
        None => io::stdout()
            .write_all(contents.as_bytes())
            .map_err(|e| Failure::data(format!("cannot write output: {e}"))),
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Ingest { corpus, common } => {
            let config = common.config()?;
            let embedder = common.embedder(&config)?;
            let stats = ingest_command(&corpus, &common.index, &config, &embedder)?;
            println!("documents\t{}", stats.documents);
            println!("chunks\t{}", stats.chunks);
            Ok(())
        }
        Command::Query {
            question,
            explain,
            common,
        } => {
            let config = common.config()?;
            let embedder = common.embedder(&config)?;
            let index = common.index()?;
            let generator = make_generator(&config)?;
            let pipeline = Pipeline::new(&index, &embedder, &config, generator.as_ref())?;
            let mut out = String::new();
            if explain {
                for (hit, alpha) in pipeline.explain(&question)? {
                    out.push_str(&format!(
                        "{}\t{:.6}\t{:.6}\n",
                        hit.chunk_id, hit.score, alpha
                    ));
                }
            } else {
                for hit in pipeline.retrieve(&question)? {
                    out.push_str(&format!(
                        "{}\t{}\t{:.6}\n",
                        hit.rank, hit.chunk_id, hit.score
                    ));
                }
            }
            write_output(None, &out)
        }
        Command::Answer {
            question,
            questions,
            out,
            dump_trace,
            common,
        } => {
            let config = common.config()?;
            let embedder = common.embedder(&config)?;
            let index = common.index()?;
            let generator = make_generator(&config)?;
            let pipeline = Pipeline::new(&index, &embedder, &config, generator.as_ref())?;
            let batch = match (question, questions) {
                (Some(q), _) => vec![BatchQuestion {
                    query_id: "q0".into(),
                    question: q,
                }],
                (None, Some(path)) => load_questions(&path)?,
                (None, None) => unreachable!("clap requires one of the question flags"),
            };
            let mut records = Vec::with_capacity(batch.len());
            let mut trace = String::new();
            for outcome in pipeline.answer_batch(&batch) {
                let outcome = outcome?;
                trace.push_str(&trace_to_jsonl(&outcome));
                records.push(outcome.record);
            }
            if let Some(path) = dump_trace {
                write_output(Some(&path), &trace)?;
            }
            write_output(out.as_deref(), &records_to_jsonl(&records))
        }
        Command::Train {
            examples,
            epochs,
            lr,
            lambda_r,
            lambda_g,
            batch_size,
            init,
            out,
            losses,
            common,
        } => {
            let config = common.config()?;
            let index = common.index()?;
            let examples = load_examples(&examples).map_err(Failure::data)?;
            let initial = match init {
                Some(path) => ProjectionEmbedder::load(&path).map_err(Failure::data)?,
                None => ProjectionEmbedder::random(index.dims(), config.vocab_buckets, config.seed),
            };
            let train_config = TrainConfig {
                epochs,
                learning_rate: lr,
                lambda_retrieval: lambda_r,
                lambda_generation: lambda_g,
                batch_size,
                rng_seed: config.seed,
            };
            let (trained, reports) =
                train(&index, &examples, &train_config, initial).map_err(|e| Failure {
                    code: if matches!(e, hoprag_core::training::TrainingError::Config(_)) {
                        USAGE
                    } else {
                        DATA
                    },
                    message: e.to_string(),
                })?;
            trained.save(&out).map_err(Failure::data)?;
            let fresh = fs::metadata(&losses).map_or(true, |m| m.len() == 0);
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&losses)
                .map_err(|e| Failure::data(format!("cannot open {}: {e}", losses.display())))?;
            let mut text = String::new();
            if fresh {
                text.push_str("epoch\tL_retrieval\tL_generation\tL_total\n");
            }
            for r in &reports {
                text.push_str(&r.tsv_line());
                text.push('\n');
            }
            file.write_all(text.as_bytes())
                .map_err(|e| Failure::data(format!("cannot write {}: {e}", losses.display())))?;
            if let (Some(first), Some(last)) = (reports.first(), reports.last()) {
                println!(
                    "L_retrieval\t{:.6}\t->\t{:.6}",
                    first.retrieval, last.retrieval
                );
            }
            Ok(())
        }
        Command::Eval {
            results,
            judgments,
            standard_bleu,
            out,
        } => {
            let report =
                evaluate_run(&results, &judgments, standard_bleu).map_err(Failure::data)?;
            if let Some(path) = out {
                let json = serde_json::to_string_pretty(&report).expect("reports serialize") + "\n";
                write_output(Some(&path), &json)?;
            }
            write_output(None, &report.to_table())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
