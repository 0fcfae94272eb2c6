//! Ranking metrics over a [`RetrievalRun`] and [`Qrels`], plus Spearman
//! correlation for sentence similarity.
//!
//! Every run query is scored independently and averaged arithmetically.
//! Queries missing from the qrels, or with no document graded above zero,
//! are left out of the mean and counted in `excluded_queries`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Qrels, RetrievalRun};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::objective::{score_matrix, Similarity};
use crate::pairgen::{apply_template, TrainingTriple};
use crate::retrieval::EMBED_CHUNK;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gain {
    /// `2^rel − 1`
    #[default]
    Exponential,
    /// `rel`
    Linear,
}

impl Gain {
    fn apply(self, grade: u32) -> f64 {
        match self {
            Gain::Exponential => 2f64.powi(grade as i32) - 1.0,
            Gain::Linear => f64::from(grade),
        }
    }
}

impl FromStr for Gain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(Gain::Exponential),
            "linear" => Ok(Gain::Linear),
            other => Err(Error::Invalid(format!("unknown gain `{other}` (exponential|linear)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub mean: f64,
    pub per_query: BTreeMap<String, f64>,
    pub excluded_queries: usize,
    pub gain_variant: Option<Gain>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Ndcg(usize),
    Recall(usize),
    Mrr(usize),
    Map,
    /// Fraction of queries with at least one relevant document in the top k.
    Success(usize),
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "map" {
            return Ok(Metric::Map);
        }
        let (name, k) = s
            .split_once('@')
            .ok_or_else(|| Error::Invalid(format!("metric `{s}` needs a cutoff, e.g. ndcg@10")))?;
        let k: usize = k
            .parse()
            .ok()
            .filter(|&k| k >= 1)
            .ok_or_else(|| Error::Invalid(format!("bad cutoff in `{s}`")))?;
        match name {
            "ndcg" => Ok(Metric::Ndcg(k)),
            "recall" => Ok(Metric::Recall(k)),
            "mrr" => Ok(Metric::Mrr(k)),
            "success" => Ok(Metric::Success(k)),
            _ => Err(Error::Invalid(format!("unknown metric `{name}`"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
            Metric::Recall(k) => write!(f, "recall@{k}"),
            Metric::Mrr(k) => write!(f, "mrr@{k}"),
            Metric::Map => write!(f, "map"),
            Metric::Success(k) => write!(f, "success@{k}"),
        }
    }
}

fn per_query<F>(run: &RetrievalRun, qrels: &Qrels, gain: Option<Gain>, score: F) -> MetricResult
where
    F: Fn(&[(String, f64)], &BTreeMap<String, u32>) -> f64,
{
    let mut values = BTreeMap::new();
    let mut excluded = 0;
    for (q, ranking) in &run.rankings {
        match qrels.get(q) {
            None => {
                log::warn!("query `{q}` has no judgments; excluded");
                excluded += 1;
            }
            Some(j) if !j.values().any(|&g| g > 0) => excluded += 1,
            Some(j) => {
                values.insert(q.clone(), score(ranking, j));
            }
        }
    }
    let mean = if values.is_empty() {
        0.0
    } else {
        values.values().sum::<f64>() / values.len() as f64
    };
    MetricResult {
        mean,
        per_query: values,
        excluded_queries: excluded,
        gain_variant: gain,
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Invalid("cutoff k must be >= 1".into()));
    }
    Ok(())
}

pub fn ndcg_at_k(run: &RetrievalRun, qrels: &Qrels, k: usize, gain: Gain) -> Result<MetricResult> {
    check_k(k)?;
    Ok(per_query(run, qrels, Some(gain), |ranking, judged| {
        let dcg: f64 = ranking
            .iter()
            .take(k)
            .enumerate()
            .map(|(r, (d, _))| gain.apply(judged.get(d).copied().unwrap_or(0)) / ((r + 2) as f64).log2())
            .sum();
        let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(r, &g)| gain.apply(g) / ((r + 2) as f64).log2())
            .sum();
        dcg / idcg
    }))
}

pub fn recall_at_k(run: &RetrievalRun, qrels: &Qrels, k: usize) -> Result<MetricResult> {
    check_k(k)?;
    Ok(per_query(run, qrels, None, |ranking, judged| {
        let relevant = judged.values().filter(|&&g| g > 0).count();
        let hits = ranking
            .iter()
            .take(k)
            .filter(|(d, _)| judged.get(d).is_some_and(|&g| g > 0))
            .count();
        hits as f64 / relevant as f64
    }))
}

pub fn success_at_k(run: &RetrievalRun, qrels: &Qrels, k: usize) -> Result<MetricResult> {
    check_k(k)?;
    Ok(per_query(run, qrels, None, |ranking, judged| {
        let hit = ranking
            .iter()
            .take(k)
            .any(|(d, _)| judged.get(d).is_some_and(|&g| g > 0));
        if hit {
            1.0
        } else {
            0.0
        }
    }))
}

pub fn mrr_at_k(run: &RetrievalRun, qrels: &Qrels, k: usize) -> Result<MetricResult> {
    check_k(k)?;
    Ok(per_query(run, qrels, None, |ranking, judged| {
        ranking
            .iter()
            .take(k)
            .position(|(d, _)| judged.get(d).is_some_and(|&g| g > 0))
            .map_or(0.0, |r| 1.0 / (r + 1) as f64)
    }))
}

/// Mean average precision over the full ranking.
pub fn map_metric(run: &RetrievalRun, qrels: &Qrels) -> Result<MetricResult> {
    Ok(per_query(run, qrels, None, |ranking, judged| {
        let relevant = judged.values().filter(|&&g| g > 0).count();
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (r, (d, _)) in ranking.iter().enumerate() {
            if judged.get(d).is_some_and(|&g| g > 0) {
                hits += 1;
                sum += hits as f64 / (r + 1) as f64;
            }
        }
        sum / relevant as f64
    }))
}

pub fn compute(metric: Metric, run: &RetrievalRun, qrels: &Qrels, gain: Gain) -> Result<MetricResult> {
    match metric {
        Metric::Ndcg(k) => ndcg_at_k(run, qrels, k, gain),
        Metric::Recall(k) => recall_at_k(run, qrels, k),
        Metric::Mrr(k) => mrr_at_k(run, qrels, k),
        Metric::Map => map_metric(run, qrels),
        Metric::Success(k) => success_at_k(run, qrels, k),
    }
}

/// Metric name → result, as written to report files.
pub type MetricReport = BTreeMap<String, MetricResult>;

pub fn evaluate(run: &RetrievalRun, qrels: &Qrels, metrics: &[Metric], gain: Gain) -> Result<MetricReport> {
    metrics
        .iter()
        .map(|&m| Ok((m.to_string(), compute(m, run, qrels, gain)?)))
        .collect()
}

/// Mean rank (1-based) for each value; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Invalid("correlation undefined for constant input".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Invalid("spearman needs at least 2 observations".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsPair {
    pub sentence_a: String,
    pub sentence_b: String,
    pub score: f64,
}

/// Cosine similarities of each encoded sentence pair.
pub fn sts_similarities(params: &EncoderParams, pairs: &[StsPair], instruction: &str) -> Result<Vec<f64>> {
    let texts_a: Vec<String> = pairs
        .iter()
        .map(|p| apply_template(instruction, &p.sentence_a))
        .collect();
    let texts_b: Vec<String> = pairs
        .iter()
        .map(|p| apply_template(instruction, &p.sentence_b))
        .collect();
    let ea = params.embed_texts(&texts_a, EMBED_CHUNK);
    let eb = params.embed_texts(&texts_b, EMBED_CHUNK);
    (0..pairs.len())
        .map(|i| {
            let a = ea.slice(ndarray::s![i..i + 1, ..]).to_owned();
            let b = eb.slice(ndarray::s![i..i + 1, ..]).to_owned();
            Ok(score_matrix(&a, &b, Similarity::Cosine)?[[0, 0]])
        })
        .collect()
}

/// Spearman correlation between model cosine similarities and gold scores.
pub fn sts_eval(params: &EncoderParams, pairs: &[StsPair], instruction: &str) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::Invalid("sts evaluation needs at least 2 pairs".into()));
    }
    let sims = sts_similarities(params, pairs, instruction)?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    spearman(&sims, &gold)
}

/// Fixed-width histogram of similarity values over `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Histogram {
    pub fn from_values(values: &[f64], bins: usize) -> Self {
        let (lo, hi) = (-1.0, 1.0);
        let mut counts = vec![0; bins.max(1)];
        let width = (hi - lo) / counts.len() as f64;
        for &v in values {
            let b = (((v - lo) / width).floor().max(0.0) as usize).min(counts.len() - 1);
            counts[b] += 1;
        }
        let n = values.len();
        let mean = if n == 0 {
            0.0
        } else {
            values.iter().sum::<f64>() / n as f64
        };
        let var = if n == 0 {
            0.0
        } else {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
        };
        Histogram {
            lo,
            hi,
            counts,
            n,
            mean,
            std: var.sqrt(),
        }
    }
}

/// Cosine similarities of queries to their positives and to their hard
/// negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDistribution {
    pub positive: Histogram,
    pub negative: Histogram,
}

pub fn similarity_distribution(
    params: &EncoderParams,
    triples: &[TrainingTriple],
    bins: usize,
) -> Result<SimilarityDistribution> {
    if triples.is_empty() {
        return Err(Error::Invalid("no labeled pairs".into()));
    }
    let queries: Vec<String> = triples.iter().map(|t| t.pair.formatted_query()).collect();
    let mut passages: Vec<String> = Vec::new();
    let mut owner = Vec::new();
    for (i, t) in triples.iter().enumerate() {
        passages.push(t.pair.formatted_positive());
        owner.push((i, true));
        for neg in &t.hard_negatives {
            passages.push(t.pair.instruction.format_passage(neg));
            owner.push((i, false));
        }
    }
    let q = params.embed_texts(&queries, EMBED_CHUNK);
    let p = params.embed_texts(&passages, EMBED_CHUNK);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (row, &(i, positive)) in owner.iter().enumerate() {
        let a = q.slice(ndarray::s![i..i + 1, ..]).to_owned();
        let b = p.slice(ndarray::s![row..row + 1, ..]).to_owned();
        let v = score_matrix(&a, &b, Similarity::Cosine)?[[0, 0]];
        if positive {
            pos.push(v);
        } else {
            neg.push(v);
        }
    }
    Ok(SimilarityDistribution {
        positive: Histogram::from_values(&pos, bins),
        negative: Histogram::from_values(&neg, bins),
    })
}
