//! End-to-end runs on the toy benchmark: pre-train, mine, fine-tune, evaluate.

use serde::Serialize;

use crate::encoder::{init_params, EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::evalmetrics::{evaluate, Gain, Metric, MetricReport};
use crate::mining::{mine_hard_negatives, EncoderEmbedder, MiningConfig};
use crate::objective::Similarity;
use crate::pairgen::{crop_pairs, title_abstract_pairs, PASSAGE_INSTRUCTION};
use crate::retrieval::{batch_search, build_index};
use crate::toy::ToyBenchmark;
use crate::trainer::{run_finetune, run_pretrain, Stage, TrainConfig};

pub const TOY_METRICS: [Metric; 5] = [
    Metric::Success(1),
    Metric::Ndcg(10),
    Metric::Recall(10),
    Metric::Mrr(10),
    Metric::Map,
];

/// Architecture sized for the toy benchmark on a single CPU core.
pub fn toy_model(seed: u64) -> EncoderConfig {
    EncoderConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 128,
        seed,
        ..EncoderConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct ToyRecipe {
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub mining: MiningConfig,
    /// Adds one crop pair per document with spans of this many words.
    pub crop_words: Option<(usize, usize)>,
}

impl ToyRecipe {
    pub fn new(seed: u64) -> Self {
        let mut pretrain = TrainConfig::new(Stage::Pretrain);
        pretrain.seed = seed;
        pretrain.model = toy_model(seed);
        pretrain.learning_rate = 1e-2;
        pretrain.warmup_steps = 5;
        let mut finetune = TrainConfig::new(Stage::Finetune);
        finetune.seed = seed;
        finetune.model = toy_model(seed);
        finetune.learning_rate = 3e-3;
        finetune.warmup_steps = 2;
        ToyRecipe {
            pretrain,
            finetune,
            mining: MiningConfig {
                seed,
                ..MiningConfig::default()
            },
            crop_words: Some((3, 5)),
        }
    }

    pub fn with_similarity(mut self, similarity: Similarity) -> Self {
        self.pretrain.loss.similarity = similarity;
        self.finetune.loss.similarity = similarity;
        self
    }
}

/// Retrieves the top 100 for every benchmark query and scores the run.
pub fn evaluate_params(bench: &ToyBenchmark, params: &EncoderParams, similarity: Similarity) -> Result<MetricReport> {
    let index = build_index(&bench.corpus, params, PASSAGE_INSTRUCTION, similarity)?;
    let run = batch_search(&index, &bench.queries, params, 100)?;
    evaluate(&run, &bench.qrels, &TOY_METRICS, Gain::Exponential)
}

pub fn pretrain_toy(bench: &ToyBenchmark, recipe: &ToyRecipe) -> Result<EncoderParams> {
    let mut pairs = title_abstract_pairs(&bench.corpus);
    if let Some((min, max)) = recipe.crop_words {
        pairs.extend(crop_pairs(&bench.corpus, recipe.pretrain.seed, min, max));
    }
    let init = init_params(&recipe.pretrain.model)?;
    Ok(run_pretrain(&recipe.pretrain, &pairs, init, &mut ())?.params)
}

pub fn finetune_toy(bench: &ToyBenchmark, recipe: &ToyRecipe, pretrained: &EncoderParams) -> Result<EncoderParams> {
    let embedder = EncoderEmbedder {
        params: pretrained,
        similarity: recipe.finetune.loss.similarity,
    };
    let triples = mine_hard_negatives(&bench.training_triples(), &bench.corpus, &embedder, &recipe.mining)?;
    Ok(run_finetune(&recipe.finetune, &triples, pretrained.clone(), &mut ())?.params)
}

#[derive(Debug, Clone, Serialize)]
pub struct ToyRunReport {
    pub seed: u64,
    pub similarity: Similarity,
    pub pretrained: MetricReport,
    pub finetuned: MetricReport,
}

impl ToyRunReport {
    pub fn mean(report: &MetricReport, metric: Metric) -> f64 {
        report.get(&metric.to_string()).map_or(f64::NAN, |m| m.mean)
    }
}

pub fn run_toy(bench: &ToyBenchmark, recipe: &ToyRecipe) -> Result<ToyRunReport> {
    let similarity = recipe.pretrain.loss.similarity;
    let pretrained = pretrain_toy(bench, recipe)?;
    let pre_report = evaluate_params(bench, &pretrained, similarity)?;
    let finetuned = finetune_toy(bench, recipe, &pretrained)?;
    let ft_report = evaluate_params(bench, &finetuned, recipe.finetune.loss.similarity)?;
    Ok(ToyRunReport {
        seed: recipe.pretrain.seed,
        similarity,
        pretrained: pre_report,
        finetuned: ft_report,
    })
}

/// Same recipe trained and evaluated under each similarity function.
#[derive(Debug, Clone, Serialize)]
pub struct SimilarityComparison {
    pub temperature: f64,
    pub runs: Vec<ToyRunReport>,
}

pub fn compare_similarity(bench: &ToyBenchmark, recipe: &ToyRecipe) -> Result<SimilarityComparison> {
    let runs = [Similarity::Dot, Similarity::Cosine]
        .into_iter()
        .map(|s| run_toy(bench, &recipe.clone().with_similarity(s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityComparison {
        temperature: recipe.pretrain.loss.temperature,
        runs,
    })
}
