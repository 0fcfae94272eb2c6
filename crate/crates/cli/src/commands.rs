use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use densetrain::corpus::{self, Corpus};
use densetrain::encoder::{init_params, load_checkpoint, save_checkpoint, EncoderParams};
use densetrain::evalmetrics::{self, Gain, Metric, StsPair};
use densetrain::io::{read_jsonl, read_to_string, to_jsonl, write_atomic};
use densetrain::mining::{
    self, consistency_mask, index_entries, index_from_entries, mine_hard_negatives, EncoderEmbedder, MiningConfig,
    PrecomputedEmbedder,
};
use densetrain::objective::Similarity;
use densetrain::pairgen::{
    self, attach_instructions, QaRecord, SimilarityLabel, SimilarityRecord, TrainingPair, TrainingTriple,
    PASSAGE_INSTRUCTION,
};
use densetrain::pipeline::{compare_similarity, ToyRecipe};
use densetrain::retrieval::{batch_search, build_index, QuerySpec};
use densetrain::synth::{self, ChatClient, HttpChatClient, QueryDomain, StubClient, SynthConfig, TaskRecord};
use densetrain::toy::{self, ToyConfig};
use densetrain::trainer::{run_finetune, run_pretrain, LossRecord, Stage, TrainConfig, TrainingHooks};

use crate::*;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::MakePairs(a) => make_pairs(a),
        Command::Convert(a) => convert(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Mine(a) => mine(a),
        Command::Filter(a) => filter(a),
        Command::Synth(c) => synth_cmd(c),
        Command::Finetune(a) => finetune(a),
        Command::Index(a) => index(a),
        Command::Search(a) => search(a),
        Command::Eval(a) => eval(a),
        Command::StsEval(a) => sts_eval(a),
        Command::Simdist(a) => simdist(a),
        Command::MakeToy(a) => make_toy(a),
        Command::CompareSimilarity(a) => compare(a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Ok(corpus::ingest_jsonl(path)?)
}

fn similarity(s: &str) -> Result<Similarity> {
    Ok(s.parse::<Similarity>()?)
}

fn ingest(a: IngestArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    corpus::write_jsonl(&corpus, &a.out)?;
    log::info!("stored {} documents", corpus.len());
    Ok(())
}

fn make_pairs(a: MakePairsArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let pairs = match a.strategy {
        PairStrategy::TitleAbstract => pairgen::title_abstract_pairs(&corpus),
        PairStrategy::Crop => {
            if a.min_words == 0 || a.min_words > a.max_words {
                bail!("crop lengths must satisfy 1 <= --min-words <= --max-words");
            }
            pairgen::crop_pairs(&corpus, a.seed, a.min_words, a.max_words)
        }
    };
    if pairs.is_empty() {
        bail!("no pairs produced (documents need titles, or enough words to crop)");
    }
    pairgen::write_pairs(&a.out, &pairs)?;
    log::info!("wrote {} pairs", pairs.len());
    Ok(())
}

fn convert(a: ConvertArgs) -> Result<()> {
    let mut triples = match a.task {
        ConvertTask::Nli => {
            let records: Vec<SimilarityRecord> = read_jsonl(&a.input)?;
            let parsed = records
                .into_iter()
                .enumerate()
                .map(|(i, r)| {
                    let label: SimilarityLabel = r
                        .label
                        .parse()
                        .with_context(|| format!("{}:{}", a.input.display(), i + 1))?;
                    Ok((r.sentence_a, r.sentence_b, label))
                })
                .collect::<Result<Vec<_>>>()?;
            pairgen::convert_similarity_records(&parsed)
        }
        ConvertTask::Qa | ConvertTask::Dialogue => {
            let records: Vec<QaRecord> = read_jsonl(&a.input)?;
            let pairs: Vec<(String, String)> = records.into_iter().map(|r| (r.question, r.answer)).collect();
            if matches!(a.task, ConvertTask::Qa) {
                pairgen::convert_qa_records(&pairs)
            } else {
                pairgen::convert_dialogue_records(&pairs)
            }
        }
    };
    if let Some(instruction) = &a.instruction {
        attach_instructions(&mut triples, instruction)?;
    }
    if triples.is_empty() {
        bail!("no triples produced from {}", a.input.display());
    }
    pairgen::write_triples(&a.out, &triples)?;
    log::info!("wrote {} triples", triples.len());
    Ok(())
}

struct CliHooks {
    out: PathBuf,
    log: Option<Vec<u8>>,
}

impl CliHooks {
    fn new(out: &Path, log: bool) -> Self {
        CliHooks {
            out: out.to_path_buf(),
            log: log.then(|| format!("{}\n", LossRecord::CSV_HEADER).into_bytes()),
        }
    }

    fn finish(self, path: Option<&Path>) -> Result<()> {
        if let (Some(path), Some(bytes)) = (path, self.log) {
            write_atomic(path, &bytes)?;
        }
        Ok(())
    }
}

impl TrainingHooks for CliHooks {
    fn on_step(&mut self, record: &LossRecord) -> densetrain::Result<()> {
        log::info!(
            "step {} epoch {} lr {:.3e} loss {:.6}",
            record.step,
            record.epoch,
            record.lr,
            record.loss
        );
        if let Some(buf) = &mut self.log {
            buf.extend_from_slice(record.csv_line().as_bytes());
            buf.push(b'\n');
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, step: usize, params: &EncoderParams) -> densetrain::Result<()> {
        let mut name = self.out.as_os_str().to_owned();
        name.push(format!(".step{step}"));
        save_checkpoint(params, Path::new(&name))
    }
}

fn load_config(path: &Path, stage: Stage) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::parse_kv(&read_to_string(path)?).with_context(|| path.display().to_string())?;
    if cfg.stage != stage {
        log::warn!(
            "{}: config stage differs from the command; using the command's stage",
            path.display()
        );
        cfg.stage = stage;
    }
    Ok(cfg)
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = load_config(&a.config, Stage::Pretrain)?;
    let mut pairs: Vec<TrainingPair> = Vec::new();
    for path in &a.pairs {
        pairs.extend(pairgen::read_pairs(path)?);
    }
    let init = match &a.init {
        Some(path) => load_checkpoint(path)?,
        None => init_params(&cfg.model)?,
    };
    let mut hooks = CliHooks::new(&a.out, a.log.is_some());
    let outcome = run_pretrain(&cfg, &pairs, init, &mut hooks)?;
    save_checkpoint(&outcome.params, &a.out)?;
    hooks.finish(a.log.as_deref())?;
    if let Some(last) = outcome.records.last() {
        log::info!(
            "pre-training done after {} steps, final loss {:.6}",
            last.step,
            last.loss
        );
    }
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let cfg = load_config(&a.config, Stage::Finetune)?;
    let triples = pairgen::read_triples(&a.triples)?;
    let init = load_checkpoint(&a.init)?;
    let mut hooks = CliHooks::new(&a.out, a.log.is_some());
    let outcome = run_finetune(&cfg, &triples, init, &mut hooks)?;
    save_checkpoint(&outcome.params, &a.out)?;
    hooks.finish(a.log.as_deref())?;
    Ok(())
}

enum LoadedEmbedder {
    Encoder(Box<EncoderParams>, Similarity),
    Precomputed(PrecomputedEmbedder),
}

impl LoadedEmbedder {
    fn load(args: &EmbedderArgs) -> Result<Self> {
        let sim = similarity(&args.similarity)?;
        match (&args.ckpt, &args.embeddings) {
            (Some(ckpt), _) => Ok(LoadedEmbedder::Encoder(Box::new(load_checkpoint(ckpt)?), sim)),
            (None, Some(path)) => Ok(LoadedEmbedder::Precomputed(PrecomputedEmbedder::from_file(path, sim)?)),
            (None, None) => bail!("one of --ckpt or --embeddings is required"),
        }
    }

    fn with<R>(&self, f: impl FnOnce(&dyn mining::Embedder) -> R) -> R {
        match self {
            LoadedEmbedder::Encoder(params, sim) => f(&EncoderEmbedder {
                params,
                similarity: *sim,
            }),
            LoadedEmbedder::Precomputed(e) => f(e),
        }
    }
}

fn mine(a: MineArgs) -> Result<()> {
    let triples = pairgen::read_triples(&a.triples)?;
    let corpus = load_corpus(&a.corpus)?;
    let embedder = LoadedEmbedder::load(&a.embedder)?;
    let config = MiningConfig {
        k: a.k,
        per_query: a.per_query,
        seed: a.seed,
        passage_instruction: PASSAGE_INSTRUCTION.to_string(),
    };
    let mined = embedder.with(|e| mine_hard_negatives(&triples, &corpus, e, &config))?;
    pairgen::write_triples(&a.out, &mined)?;
    Ok(())
}

fn filter(a: FilterArgs) -> Result<()> {
    let triples = pairgen::read_triples(&a.pairs)?;
    let corpus = load_corpus(&a.corpus)?;
    let embedder = LoadedEmbedder::load(&a.embedder)?;
    let pairs: Vec<TrainingPair> = triples.iter().map(|t| t.pair.clone()).collect();
    let keep = embedder.with(|e| consistency_mask(&pairs, &corpus, e, a.top, PASSAGE_INSTRUCTION))?;
    let (kept, dropped): (Vec<_>, Vec<_>) = triples.into_iter().zip(keep).partition(|(_, k)| *k);
    let kept: Vec<TrainingTriple> = kept.into_iter().map(|(t, _)| t).collect();
    let dropped: Vec<TrainingTriple> = dropped.into_iter().map(|(t, _)| t).collect();
    log::info!("retained {} of {} pairs", kept.len(), kept.len() + dropped.len());
    pairgen::write_triples(&a.out, &kept)?;
    if let Some(path) = &a.dropped {
        pairgen::write_triples(path, &dropped)?;
    }
    Ok(())
}

fn chat_client(c: &SynthCommon) -> Box<dyn ChatClient> {
    if c.stub {
        return Box::new(StubClient);
    }
    let endpoint = c.endpoint.clone().expect("required unless --stub");
    let model = c.model.clone().expect("required unless --stub");
    Box::new(HttpChatClient::from_env(endpoint, model, &c.token_env))
}

fn synth_config(c: &SynthCommon) -> SynthConfig {
    SynthConfig {
        retries: c.retries,
        max_in_flight: c.max_in_flight,
        seed: c.seed,
    }
}

/// Writes `new` records, after any existing ones when appending.
fn write_records<T: Serialize>(
    c: &SynthCommon,
    new: &[T],
    existing: impl FnOnce(&Path) -> Result<Vec<u8>>,
) -> Result<()> {
    let mut bytes = if c.append && c.out.exists() {
        existing(&c.out)?
    } else {
        Vec::new()
    };
    bytes.extend(to_jsonl(new));
    write_atomic(&c.out, &bytes)?;
    Ok(())
}

fn existing_triples(path: &Path) -> Result<Vec<u8>> {
    let records: Vec<pairgen::TripleRecord> = pairgen::read_triples(path)?
        .iter()
        .map(pairgen::TripleRecord::from)
        .collect();
    Ok(to_jsonl(&records))
}

fn synth_cmd(command: SynthCommand) -> Result<()> {
    match command {
        SynthCommand::Tasks(a) => {
            let client = chat_client(&a.common);
            let tasks = synth::generate_tasks(client.as_ref(), a.common.count, a.common.retries, a.common.seed)?;
            let records: Vec<TaskRecord> = tasks.into_iter().map(|task| TaskRecord { task }).collect();
            write_records(&a.common, &records, |p| Ok(to_jsonl(&read_jsonl::<TaskRecord>(p)?)))
        }
        SynthCommand::Examples(a) => {
            let client = chat_client(&a.common);
            let tasks: Vec<String> = read_jsonl::<TaskRecord>(&a.tasks)?
                .into_iter()
                .map(|r| r.task)
                .collect();
            let (examples, discarded) =
                synth::generate_examples(client.as_ref(), &tasks, a.common.count, &synth_config(&a.common))?;
            if discarded > 0 {
                log::warn!("discarded {discarded} unparseable examples");
            }
            let records: Vec<pairgen::TripleRecord> = examples
                .iter()
                .map(|e| pairgen::TripleRecord::from(&e.to_triple()))
                .collect();
            write_records(&a.common, &records, existing_triples)
        }
        SynthCommand::Queries(a) => {
            let client = chat_client(&a.common);
            let domain: QueryDomain = a.domain.parse()?;
            let corpus = load_corpus(&a.corpus)?;
            let docs = synth::sample_documents(&corpus, a.common.count, a.common.seed);
            let (pairs, discarded) =
                synth::generate_corpus_queries(client.as_ref(), &docs, domain, &synth_config(&a.common))?;
            if discarded > 0 {
                log::warn!("discarded {discarded} empty queries");
            }
            let records: Vec<pairgen::TripleRecord> = pairs
                .into_iter()
                .map(|p| pairgen::TripleRecord::from(&TrainingTriple::from(p)))
                .collect();
            write_records(&a.common, &records, existing_triples)
        }
    }
}

fn index(a: IndexArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let params = load_checkpoint(&a.ckpt)?;
    let index = build_index(&corpus, &params, &a.passage_instruction, Similarity::Dot)?;
    mining::write_embeddings(&a.out, &index_entries(&index))?;
    Ok(())
}

fn search(a: SearchArgs) -> Result<()> {
    if a.k == 0 {
        bail!("--k must be >= 1");
    }
    let index = index_from_entries(mining::read_embeddings(&a.index)?, similarity(&a.similarity)?)?;
    let params = load_checkpoint(&a.ckpt)?;
    if params.config.d_model != index.dim() {
        bail!(
            "checkpoint dimension {} does not match index dimension {}",
            params.config.d_model,
            index.dim()
        );
    }
    let queries: Vec<QuerySpec> = read_jsonl(&a.queries)?;
    let run = batch_search(&index, &queries, &params, a.k)?;
    corpus::write_run(&run, &a.out, &a.tag)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let run = corpus::read_run(&a.run)?;
    let qrels = corpus::load_qrels(&a.qrels)?;
    let metrics = a
        .metrics
        .split(',')
        .filter(|m| !m.trim().is_empty())
        .map(str::parse::<Metric>)
        .collect::<densetrain::Result<Vec<_>>>()?;
    if metrics.is_empty() {
        bail!("--metrics is empty");
    }
    let gain: Gain = a.gain.parse()?;
    let report = evalmetrics::evaluate(&run, &qrels, &metrics, gain)?;
    for (name, m) in &report {
        log::info!("{name}: {:.4}", m.mean);
    }
    write_json(&a.out, &report)
}

#[derive(Serialize)]
struct StsReport {
    spearman: f64,
    pairs: usize,
    instruction: String,
}

fn sts_eval(a: StsEvalArgs) -> Result<()> {
    let pairs: Vec<StsPair> = read_jsonl(&a.pairs)?;
    let params = load_checkpoint(&a.ckpt)?;
    let spearman = evalmetrics::sts_eval(&params, &pairs, &a.instruction)?;
    write_json(
        &a.out,
        &StsReport {
            spearman,
            pairs: pairs.len(),
            instruction: a.instruction,
        },
    )
}

fn simdist(a: SimdistArgs) -> Result<()> {
    if a.bins == 0 {
        bail!("--bins must be >= 1");
    }
    let triples = pairgen::read_triples(&a.pairs)?;
    let params = load_checkpoint(&a.ckpt)?;
    let dist = evalmetrics::similarity_distribution(&params, &triples, a.bins)?;
    write_json(&a.out, &dist)
}

fn make_toy(a: MakeToyArgs) -> Result<()> {
    let bench = toy::generate(&ToyConfig {
        seed: a.seed,
        ..ToyConfig::default()
    })?;
    bench.write_dir(&a.out)?;
    let readme = format!(
        "query instruction: {}\ndocuments: {}\nqueries: {}\nqa records: {}\n",
        toy::TOY_QUERY_INSTRUCTION,
        bench.corpus.len(),
        bench.queries.len(),
        bench.qa.len()
    );
    write_atomic(&a.out.join("README.txt"), readme.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct ComparisonSummary {
    metric: String,
    dot: f64,
    cosine: f64,
    dot_scores_higher: bool,
}

fn compare(a: CompareSimilarityArgs) -> Result<()> {
    let bench = toy::generate(&ToyConfig {
        seed: a.toy_seed,
        ..ToyConfig::default()
    })?;
    let comparison = compare_similarity(&bench, &ToyRecipe::new(a.seed))?;
    let metric = Metric::Ndcg(10).to_string();
    let score = |i: usize| comparison.runs[i].finetuned[&metric].mean;
    let summary = ComparisonSummary {
        metric: metric.clone(),
        dot: score(0),
        cosine: score(1),
        dot_scores_higher: score(0) > score(1),
    };
    log::info!("{metric}: dot {:.4}, cosine {:.4}", summary.dot, summary.cosine);
    write_json(
        &a.out,
        &serde_json::json!({ "summary": summary, "comparison": comparison }),
    )
}
