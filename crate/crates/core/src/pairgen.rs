//! Training pair construction.
//!
//! Silver pairs for pre-training come from titled documents (title as query,
//! body as positive) or from two disjoint word spans of one document. Labeled
//! task records (NLI/similarity, QA, dialogue) become instructioned triples
//! for fine-tuning.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::io;

pub const PRETRAIN_QUERY_INSTRUCTION: &str =
    "Given a query, retrieve passages that are relevant to the query. Query: {}";
pub const PASSAGE_INSTRUCTION: &str = "Represent this passage. Passage: {}";

pub const SIMILARITY_INSTRUCTION: &str = "Given a sentence, retrieve sentences with the same meaning";
pub const QA_INSTRUCTION: &str = "Given a question, retrieve relevant documents that answer the question";
pub const DIALOGUE_INSTRUCTION: &str =
    "Given a question with context from online medical forums, retrieve responses that best answer the question";

/// Substitutes `text` into an instruction template.
///
/// The first `{}` is replaced by the text; a template without a placeholder
/// gets the text appended after a single space.
pub fn apply_template(template: &str, text: &str) -> String {
    match template.find("{}") {
        Some(pos) => {
            let mut out = String::with_capacity(template.len() + text.len());
            out.push_str(&template[..pos]);
            out.push_str(text);
            out.push_str(&template[pos + 2..]);
            out
        }
        None if template.is_empty() => text.to_string(),
        None => format!("{template} {text}"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub query_instruction: String,
    pub passage_instruction: String,
}

impl Instruction {
    pub fn new(query_instruction: &str) -> Result<Self> {
        if query_instruction.trim().is_empty() {
            return Err(Error::Invalid("query instruction must not be empty".into()));
        }
        Ok(Instruction {
            query_instruction: query_instruction.to_string(),
            passage_instruction: PASSAGE_INSTRUCTION.to_string(),
        })
    }

    pub fn pretraining() -> Self {
        Instruction {
            query_instruction: PRETRAIN_QUERY_INSTRUCTION.to_string(),
            passage_instruction: PASSAGE_INSTRUCTION.to_string(),
        }
    }

    pub fn format_query(&self, query: &str) -> String {
        apply_template(&self.query_instruction, query)
    }

    pub fn format_passage(&self, passage: &str) -> String {
        apply_template(&self.passage_instruction, passage)
    }
}

impl Default for Instruction {
    fn default() -> Self {
        Instruction::pretraining()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    TitleAbstract,
    Crop,
    Labeled,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    /// Optional stable id (doc id for silver pairs); used to look up
    /// precomputed query embeddings.
    pub id: Option<String>,
    pub query: String,
    pub positive: String,
    pub instruction: Instruction,
    pub origin: Origin,
}

impl TrainingPair {
    pub fn new(query: impl Into<String>, positive: impl Into<String>, origin: Origin) -> Self {
        TrainingPair {
            id: None,
            query: query.into(),
            positive: positive.into(),
            instruction: Instruction::pretraining(),
            origin,
        }
    }

    pub fn formatted_query(&self) -> String {
        self.instruction.format_query(&self.query)
    }

    pub fn formatted_positive(&self) -> String {
        self.instruction.format_passage(&self.positive)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTriple {
    pub pair: TrainingPair,
    pub hard_negatives: Vec<String>,
}

impl TrainingTriple {
    pub fn new(pair: TrainingPair, hard_negatives: Vec<String>) -> Self {
        let mut t = TrainingTriple {
            pair,
            hard_negatives: Vec::new(),
        };
        t.set_hard_negatives(hard_negatives);
        t
    }

    /// Replaces the hard negatives, dropping any exact copy of the positive.
    pub fn set_hard_negatives(&mut self, negatives: Vec<String>) {
        let positive = &self.pair.positive;
        self.hard_negatives = negatives.into_iter().filter(|n| n != positive).collect();
    }
}

impl From<TrainingPair> for TrainingTriple {
    fn from(pair: TrainingPair) -> Self {
        TrainingTriple {
            pair,
            hard_negatives: Vec::new(),
        }
    }
}

impl AsMut<TrainingPair> for TrainingPair {
    fn as_mut(&mut self) -> &mut TrainingPair {
        self
    }
}

impl AsMut<TrainingPair> for TrainingTriple {
    fn as_mut(&mut self) -> &mut TrainingPair {
        &mut self.pair
    }
}

/// Sets the query instruction (and the standard passage instruction) on every
/// item. Re-attaching overwrites.
pub fn attach_instructions<T: AsMut<TrainingPair>>(items: &mut [T], query_instruction: &str) -> Result<()> {
    let instruction = Instruction::new(query_instruction)?;
    for item in items {
        item.as_mut().instruction = instruction.clone();
    }
    Ok(())
}

pub fn title_abstract_pairs(corpus: &Corpus) -> Vec<TrainingPair> {
    corpus
        .iter()
        .filter_map(|doc| {
            let title = doc.title.as_deref()?;
            let mut pair = TrainingPair::new(title, doc.text.as_str(), Origin::TitleAbstract);
            pair.id = Some(doc.id.clone());
            Some(pair)
        })
        .collect()
}

/// Byte ranges of the whitespace-delimited words of `text`.
fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Word-index intervals `[start, end)` of a sampled crop pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpans {
    pub query: (usize, usize),
    pub positive: (usize, usize),
}

/// Samples two non-overlapping word spans from a document of `n_words` words.
///
/// Span lengths are drawn uniformly from `[min_len, max_len]` (rejecting
/// pairs that do not fit), then the placement is uniform over all ways to
/// distribute the leftover words into the three gaps. The earlier span is the
/// query. Returns `None` when the document is shorter than `2 * min_len`.
pub fn sample_crop(n_words: usize, min_len: usize, max_len: usize, rng: &mut impl Rng) -> Option<CropSpans> {
    if min_len == 0 || max_len < min_len || n_words < 2 * min_len {
        return None;
    }
    let hi = max_len.min(n_words - min_len);
    let (len_q, len_p) = loop {
        let a = rng.random_range(min_len..=hi);
        let b = rng.random_range(min_len..=hi);
        if a + b <= n_words {
            break (a, b);
        }
    };
    let free = n_words - len_q - len_p;
    let mut cuts = sample(rng, free + 2, 2).into_vec();
    cuts.sort_unstable();
    let before = cuts[0];
    let between = cuts[1] - cuts[0] - 1;
    let q_start = before;
    let p_start = q_start + len_q + between;
    Some(CropSpans {
        query: (q_start, q_start + len_q),
        positive: (p_start, p_start + len_p),
    })
}

/// Disjoint-crop silver pairs, one per eligible document. Deterministic in
/// `seed`; each document draws from its own RNG stream.
pub fn crop_pairs(corpus: &Corpus, seed: u64, min_len: usize, max_len: usize) -> Vec<TrainingPair> {
    corpus
        .iter()
        .enumerate()
        .filter_map(|(idx, doc)| {
            let words = word_spans(&doc.text);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            let spans = sample_crop(words.len(), min_len, max_len, &mut rng)?;
            let slice = |(s, e): (usize, usize)| &doc.text[words[s].0..words[e - 1].1];
            let mut pair = TrainingPair::new(slice(spans.query), slice(spans.positive), Origin::Crop);
            pair.id = Some(doc.id.clone());
            Some(pair)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityLabel {
    Positive,
    Negative,
    Neutral,
}

impl std::str::FromStr for SimilarityLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entail" | "entailment" | "similar" | "1" => Ok(SimilarityLabel::Positive),
            "contradict" | "contradiction" | "non-similar" | "nonsimilar" | "not-similar" | "0" => {
                Ok(SimilarityLabel::Negative)
            }
            "neutral" => Ok(SimilarityLabel::Neutral),
            other => Err(Error::Invalid(format!("unknown similarity label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub sentence_a: String,
    pub sentence_b: String,
    pub label: String,
}

/// Groups records by anchor sentence. Each positive partner yields one triple
/// whose hard negatives are all negative partners of the same anchor; neutral
/// records are dropped.
pub fn convert_similarity_records(records: &[(String, String, SimilarityLabel)]) -> Vec<TrainingTriple> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, (Vec<&str>, Vec<&str>)> = HashMap::new();
    for (a, b, label) in records {
        let entry = groups.entry(a.as_str()).or_insert_with(|| {
            order.push(a.as_str());
            (Vec::new(), Vec::new())
        });
        match label {
            SimilarityLabel::Positive => entry.0.push(b),
            SimilarityLabel::Negative => entry.1.push(b),
            SimilarityLabel::Neutral => {}
        }
    }
    let instruction = Instruction::new(SIMILARITY_INSTRUCTION).expect("non-empty constant");
    let mut out = Vec::new();
    for anchor in order {
        let (positives, negatives) = &groups[anchor];
        for positive in positives {
            let mut pair = TrainingPair::new(anchor, *positive, Origin::Labeled);
            pair.instruction = instruction.clone();
            out.push(TrainingTriple::new(
                pair,
                negatives.iter().map(|s| s.to_string()).collect(),
            ));
        }
    }
    out
}

fn convert_simple(records: &[(String, String)], instruction: &str) -> Vec<TrainingTriple> {
    let instruction = Instruction::new(instruction).expect("non-empty constant");
    records
        .iter()
        .map(|(q, p)| {
            let mut pair = TrainingPair::new(q.as_str(), p.as_str(), Origin::Labeled);
            pair.instruction = instruction.clone();
            TrainingTriple::from(pair)
        })
        .collect()
}

/// One line of a question/answer JSONL file (QA and dialogue conversion input).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question: String,
    pub answer: String,
}

/// Question → gold passage.
pub fn convert_qa_records(records: &[(String, String)]) -> Vec<TrainingTriple> {
    convert_simple(records, QA_INSTRUCTION)
}

/// User query → answer.
pub fn convert_dialogue_records(records: &[(String, String)]) -> Vec<TrainingTriple> {
    convert_simple(records, DIALOGUE_INSTRUCTION)
}

/// Flat JSONL record shared by pair and triple files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub query: String,
    pub positive: String,
    #[serde(default)]
    pub hard_negatives: Vec<String>,
    pub query_instruction: String,
    pub passage_instruction: String,
    pub origin: Origin,
}

impl From<&TrainingTriple> for TripleRecord {
    fn from(t: &TrainingTriple) -> Self {
        TripleRecord {
            id: t.pair.id.clone(),
            query: t.pair.query.clone(),
            positive: t.pair.positive.clone(),
            hard_negatives: t.hard_negatives.clone(),
            query_instruction: t.pair.instruction.query_instruction.clone(),
            passage_instruction: t.pair.instruction.passage_instruction.clone(),
            origin: t.pair.origin,
        }
    }
}

impl TryFrom<TripleRecord> for TrainingTriple {
    type Error = Error;

    fn try_from(r: TripleRecord) -> Result<Self> {
        if r.query.trim().is_empty() || r.positive.trim().is_empty() {
            return Err(Error::Invalid("query and positive must be non-empty".into()));
        }
        if r.query_instruction.trim().is_empty() || r.passage_instruction.trim().is_empty() {
            return Err(Error::Invalid("instructions must be non-empty".into()));
        }
        let pair = TrainingPair {
            id: r.id,
            query: r.query,
            positive: r.positive,
            instruction: Instruction {
                query_instruction: r.query_instruction,
                passage_instruction: r.passage_instruction,
            },
            origin: r.origin,
        };
        Ok(TrainingTriple::new(pair, r.hard_negatives))
    }
}

pub fn write_triples(path: &Path, triples: &[TrainingTriple]) -> Result<()> {
    let records: Vec<TripleRecord> = triples.iter().map(TripleRecord::from).collect();
    io::write_jsonl(path, &records)
}

pub fn write_pairs(path: &Path, pairs: &[TrainingPair]) -> Result<()> {
    let triples: Vec<TrainingTriple> = pairs.iter().cloned().map(TrainingTriple::from).collect();
    write_triples(path, &triples)
}

pub fn read_triples(path: &Path) -> Result<Vec<TrainingTriple>> {
    let records: Vec<TripleRecord> = io::read_jsonl(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| TrainingTriple::try_from(r).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}

pub fn read_pairs(path: &Path) -> Result<Vec<TrainingPair>> {
    Ok(read_triples(path)?.into_iter().map(|t| t.pair).collect())
}
