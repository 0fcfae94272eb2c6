//! `densetrain` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 remote-service error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Debug, Parser)]
#[command(
    name = "densetrain",
    version,
    about = "Train, mine, search and evaluate a small dense retriever"
)]
struct Cli {
    /// Worker threads for parallel encoding and search (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a corpus JSONL file and store it.
    Ingest(IngestArgs),
    /// Build pre-training pairs from a stored corpus.
    MakePairs(MakePairsArgs),
    /// Convert labeled task records into fine-tuning triples.
    Convert(ConvertArgs),
    /// Contrastive pre-training with in-batch negatives.
    Pretrain(PretrainArgs),
    /// Append mined hard negatives to each triple.
    Mine(MineArgs),
    /// Keep pairs whose positive ranks in the top results for their own query.
    Filter(FilterArgs),
    /// Generate synthetic tasks, examples or queries with a chat model.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Fine-tuning with hard negatives.
    Finetune(FinetuneArgs),
    /// Embed a corpus into an embedding file.
    Index(IndexArgs),
    /// Search an embedding file with encoded queries and write a TREC run.
    Search(SearchArgs),
    /// Score a TREC run against qrels.
    Eval(EvalArgs),
    /// Spearman correlation of cosine similarity with gold sentence-pair scores.
    StsEval(StsEvalArgs),
    /// Histograms of query-positive and query-negative cosine similarity.
    Simdist(SimdistArgs),
    /// Write the bundled toy benchmark (corpus, queries, qrels, QA records).
    MakeToy(MakeToyArgs),
    /// Train and evaluate the toy recipe under dot product and cosine similarity.
    CompareSimilarity(CompareSimilarityArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Corpus JSONL with `_id`, `text` and optional `title`.
    #[arg(long)]
    corpus: PathBuf,
    /// Output corpus store.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PairStrategy {
    TitleAbstract,
    Crop,
}

#[derive(Debug, Args)]
struct MakePairsArgs {
    /// Pairing strategy.
    #[arg(long, value_enum)]
    strategy: PairStrategy,
    /// Corpus store written by `ingest`.
    #[arg(long)]
    corpus: PathBuf,
    /// Seed for crop sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shortest crop span, in words.
    #[arg(long, default_value_t = 8)]
    min_words: usize,
    /// Longest crop span, in words.
    #[arg(long, default_value_t = 32)]
    max_words: usize,
    /// Output pairs JSONL.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConvertTask {
    /// Records `{sentence_a, sentence_b, label}` with entailment|contradiction|neutral.
    Nli,
    /// Records `{question, answer}`.
    Qa,
    /// Records `{question, answer}` from medical dialogue.
    Dialogue,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    /// Record type of the input file.
    #[arg(long, value_enum)]
    task: ConvertTask,
    /// Input JSONL.
    #[arg(long = "in", value_name = "IN")]
    input: PathBuf,
    /// Replace the task's default query instruction.
    #[arg(long)]
    instruction: Option<String>,
    /// Output triples JSONL.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Training config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Pairs JSONL; repeat to concatenate several files.
    #[arg(long, required = true)]
    pairs: Vec<PathBuf>,
    /// Start from this checkpoint instead of fresh weights.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss log (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// Training config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Triples JSONL with hard negatives.
    #[arg(long)]
    triples: PathBuf,
    /// Checkpoint to start from.
    #[arg(long)]
    init: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss log (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(id = "embedder", required = true, multiple = false)]
struct EmbedderArgs {
    /// Encoder checkpoint used to embed queries and passages.
    #[arg(long, group = "embedder")]
    ckpt: Option<PathBuf>,
    /// Precomputed embeddings keyed by query and document id.
    #[arg(long, group = "embedder")]
    embeddings: Option<PathBuf>,
    /// Similarity function for ranking.
    #[arg(long, default_value = "dot")]
    similarity: String,
}

#[derive(Debug, Args)]
struct MineArgs {
    /// Triples JSONL.
    #[arg(long)]
    triples: PathBuf,
    /// Corpus store to mine from.
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    embedder: EmbedderArgs,
    /// Candidate pool: the top k of each query's ranking.
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Negatives sampled per query.
    #[arg(long, default_value_t = 1)]
    per_query: usize,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output triples JSONL.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FilterArgs {
    /// Pairs or triples JSONL.
    #[arg(long)]
    pairs: PathBuf,
    /// Corpus store containing every positive passage.
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    embedder: EmbedderArgs,
    /// Keep a pair when its positive ranks within this many results.
    #[arg(long, default_value_t = 3)]
    top: usize,
    /// Output for retained records.
    #[arg(long)]
    out: PathBuf,
    /// Output for dropped records.
    #[arg(long)]
    dropped: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthCommon {
    /// Chat-completions URL, e.g. https://api.openai.com/v1/chat/completions.
    #[arg(long, required_unless_present = "stub")]
    endpoint: Option<String>,
    /// Model name sent with each request.
    #[arg(long, required_unless_present = "stub")]
    model: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    token_env: String,
    /// Answer every prompt with the deterministic offline stub.
    #[arg(long)]
    stub: bool,
    /// Number of items to generate.
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Re-asks after an unparseable reply.
    #[arg(long, default_value_t = 3)]
    retries: usize,
    /// Concurrent requests.
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    /// Append to an existing output file instead of replacing it.
    #[arg(long)]
    append: bool,
    /// Output JSONL.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum SynthCommand {
    /// Brainstorm retrieval task descriptions.
    Tasks(SynthTasksArgs),
    /// Write (query, positive, hard negative) examples for tasks.
    Examples(SynthExamplesArgs),
    /// Write one query per sampled corpus passage.
    Queries(SynthQueriesArgs),
}

#[derive(Debug, Args)]
struct SynthTasksArgs {
    #[command(flatten)]
    common: SynthCommon,
}

#[derive(Debug, Args)]
struct SynthExamplesArgs {
    /// Tasks JSONL written by `synth tasks`.
    #[arg(long)]
    tasks: PathBuf,
    #[command(flatten)]
    common: SynthCommon,
}

#[derive(Debug, Args)]
struct SynthQueriesArgs {
    /// Corpus store to draw passages from.
    #[arg(long)]
    corpus: PathBuf,
    /// Instruction domain attached to generated pairs.
    #[arg(long, default_value = "pubmed")]
    domain: String,
    #[command(flatten)]
    common: SynthCommon,
}

#[derive(Debug, Args)]
struct IndexArgs {
    /// Corpus store.
    #[arg(long)]
    corpus: PathBuf,
    /// Encoder checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Passage instruction template (`{}` marks the text).
    #[arg(long, default_value = densetrain::pairgen::PASSAGE_INSTRUCTION)]
    passage_instruction: String,
    /// Output embedding file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Embedding file written by `index`.
    #[arg(long)]
    index: PathBuf,
    /// Queries JSONL with `_id`, `text` and optional `instruction`.
    #[arg(long)]
    queries: PathBuf,
    /// Encoder checkpoint for the queries (same one used by `index`).
    #[arg(long)]
    ckpt: PathBuf,
    /// Similarity function for ranking.
    #[arg(long, default_value = "dot")]
    similarity: String,
    /// Results per query.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Run tag in the last TREC column.
    #[arg(long, default_value = "densetrain")]
    tag: String,
    /// Output TREC run.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// TREC run file.
    #[arg(long)]
    run: PathBuf,
    /// Qrels TSV (query-id, corpus-id, score).
    #[arg(long)]
    qrels: PathBuf,
    /// Comma-separated metrics: ndcg@k, recall@k, mrr@k, success@k, map.
    #[arg(long, default_value = "ndcg@10,recall@5,recall@20,ndcg@20,mrr@5,map")]
    metrics: String,
    /// nDCG gain: exponential (2^rel - 1) or linear (rel).
    #[arg(long, default_value = "exponential")]
    gain: String,
    /// Output JSON report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct StsEvalArgs {
    /// JSONL of `{sentence_a, sentence_b, score}`.
    #[arg(long)]
    pairs: PathBuf,
    /// Encoder checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Instruction applied to both sentences.
    #[arg(long, default_value = densetrain::pairgen::SIMILARITY_INSTRUCTION)]
    instruction: String,
    /// Output JSON report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimdistArgs {
    /// Encoder checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Triples JSONL; positives and hard negatives are both scored.
    #[arg(long)]
    pairs: PathBuf,
    /// Histogram bins over [-1, 1].
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Output JSON report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MakeToyArgs {
    /// Benchmark seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareSimilarityArgs {
    /// Training seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Benchmark seed.
    #[arg(long, default_value_t = 0)]
    toy_seed: u64,
    /// Output JSON report.
    #[arg(long)]
    out: PathBuf,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<densetrain::Error>() {
            return if e.is_remote() { 3 } else { 2 };
        }
        if let Some(e) = cause.downcast_ref::<densetrain::synth::SynthError>() {
            return if e.is_transport() { 3 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose);
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("densetrain: error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("densetrain: error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("densetrain: error: {message}");
            ExitCode::from(exit_code(&e))
        }
    }
}
