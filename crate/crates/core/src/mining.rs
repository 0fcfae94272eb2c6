//! Hard-negative mining and round-trip consistency filtering.
//!
//! Both procedures work against any [`Embedder`]: the current encoder
//! checkpoint, or vectors precomputed by an external model and stored in the
//! embedding file format below.
//!
//! Embedding file layout (little-endian):
//!
//! ```text
//! dim    u32
//! count  u64
//! count × { id_len u32, id (UTF-8, id_len bytes), dim × f32 }
//! ```

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::io;
use crate::objective::Similarity;
use crate::pairgen::{apply_template, TrainingPair, TrainingTriple, PASSAGE_INSTRUCTION};
use crate::retrieval::{FlatIndex, EMBED_CHUNK};

/// A text to embed. `id` identifies it for lookup-based embedders.
#[derive(Debug, Clone, Copy)]
pub struct EmbedItem<'a> {
    pub id: &'a str,
    pub text: &'a str,
    pub instruction: &'a str,
}

pub trait Embedder: Sync {
    fn similarity(&self) -> Similarity;

    /// One row per item, in order.
    fn embed(&self, items: &[EmbedItem<'_>]) -> Result<Array2<f64>>;
}

pub struct EncoderEmbedder<'a> {
    pub params: &'a EncoderParams,
    pub similarity: Similarity,
}

impl Embedder for EncoderEmbedder<'_> {
    fn similarity(&self) -> Similarity {
        self.similarity
    }

    fn embed(&self, items: &[EmbedItem<'_>]) -> Result<Array2<f64>> {
        let texts: Vec<String> = items.iter().map(|i| apply_template(i.instruction, i.text)).collect();
        if texts.is_empty() {
            return Ok(Array2::zeros((0, self.params.config.d_model)));
        }
        Ok(self.params.embed_texts(&texts, EMBED_CHUNK))
    }
}

/// Looks vectors up by item id; text and instruction are ignored.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbedder {
    dim: usize,
    vectors: HashMap<String, Array1<f64>>,
    similarity: Similarity,
}

impl PrecomputedEmbedder {
    pub fn new(entries: Vec<(String, Vec<f32>)>, similarity: Similarity) -> Result<Self> {
        let dim = entries.first().map(|e| e.1.len()).unwrap_or(0);
        let mut vectors = HashMap::with_capacity(entries.len());
        for (id, v) in entries {
            if v.len() != dim {
                return Err(Error::Shape(format!(
                    "vector `{id}` has dim {} (expected {dim})",
                    v.len()
                )));
            }
            let row = Array1::from_iter(v.into_iter().map(f64::from));
            if vectors.insert(id.clone(), row).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(PrecomputedEmbedder {
            dim,
            vectors,
            similarity,
        })
    }

    pub fn from_file(path: &Path, similarity: Similarity) -> Result<Self> {
        Self::new(read_embeddings(path)?, similarity)
    }
}

impl Embedder for PrecomputedEmbedder {
    fn similarity(&self) -> Similarity {
        self.similarity
    }

    fn embed(&self, items: &[EmbedItem<'_>]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((items.len(), self.dim));
        for (i, item) in items.iter().enumerate() {
            let v = self
                .vectors
                .get(item.id)
                .ok_or_else(|| Error::Invalid(format!("no precomputed embedding for `{}`", item.id)))?;
            out.row_mut(i).assign(v);
        }
        Ok(out)
    }
}

pub fn encode_embeddings(entries: &[(String, Vec<f32>)]) -> Result<Vec<u8>> {
    let dim = entries.first().map(|e| e.1.len()).unwrap_or(0);
    let mut buf = Vec::new();
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (id, v) in entries {
        if v.len() != dim {
            return Err(Error::Shape(format!(
                "vector `{id}` has dim {} (expected {dim})",
                v.len()
            )));
        }
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Vec<(String, Vec<f32>)>> {
    let mut off = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = off
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Invalid(format!("embedding file truncated at byte {off}")))?;
        let s = &bytes[off..end];
        off = end;
        Ok(s)
    };
    let dim = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let id = std::str::from_utf8(take(len)?)
            .map_err(|_| Error::Invalid("embedding id is not UTF-8".into()))?
            .to_string();
        let raw = take(4 * dim)?;
        let v = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((id, v));
    }
    if off != bytes.len() {
        return Err(Error::Invalid(format!(
            "{} trailing bytes in embedding file",
            bytes.len() - off
        )));
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, entries: &[(String, Vec<f32>)]) -> Result<()> {
    io::write_atomic(path, &encode_embeddings(entries)?)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<(String, Vec<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

/// Index rows as stored entries (values narrowed to `f32`).
pub fn index_entries(index: &FlatIndex) -> Vec<(String, Vec<f32>)> {
    index
        .ids()
        .iter()
        .zip(index.matrix().outer_iter())
        .map(|(id, row)| (id.clone(), row.iter().map(|&x| x as f32).collect()))
        .collect()
}

pub fn index_from_entries(entries: Vec<(String, Vec<f32>)>, similarity: Similarity) -> Result<FlatIndex> {
    let dim = entries.first().map(|e| e.1.len()).unwrap_or(0);
    let mut m = Array2::zeros((entries.len(), dim));
    let mut ids = Vec::with_capacity(entries.len());
    for (i, (id, v)) in entries.into_iter().enumerate() {
        if v.len() != dim {
            return Err(Error::Shape(format!(
                "vector `{id}` has dim {} (expected {dim})",
                v.len()
            )));
        }
        for (j, x) in v.into_iter().enumerate() {
            m[[i, j]] = f64::from(x);
        }
        ids.push(id);
    }
    FlatIndex::new(ids, m, similarity)
}

fn corpus_index(corpus: &Corpus, embedder: &dyn Embedder, passage_instruction: &str) -> Result<FlatIndex> {
    let items: Vec<EmbedItem<'_>> = corpus
        .iter()
        .map(|d| EmbedItem {
            id: &d.id,
            text: &d.text,
            instruction: passage_instruction,
        })
        .collect();
    let matrix = embedder.embed(&items)?;
    FlatIndex::new(
        corpus.iter().map(|d| d.id.clone()).collect(),
        matrix,
        embedder.similarity(),
    )
}

fn query_id(pair: &TrainingPair, index: usize) -> String {
    pair.id.clone().unwrap_or_else(|| format!("q{index}"))
}

fn embed_queries<'a>(
    pairs: impl Iterator<Item = &'a TrainingPair>,
    embedder: &dyn Embedder,
) -> Result<(Vec<String>, Array2<f64>)> {
    let pairs: Vec<&TrainingPair> = pairs.collect();
    let ids: Vec<String> = pairs.iter().enumerate().map(|(i, p)| query_id(p, i)).collect();
    let items: Vec<EmbedItem<'_>> = pairs
        .iter()
        .zip(&ids)
        .map(|(p, id)| EmbedItem {
            id,
            text: &p.query,
            instruction: &p.instruction.query_instruction,
        })
        .collect();
    let matrix = embedder.embed(&items)?;
    drop(items);
    Ok((ids, matrix))
}

#[derive(Debug, Clone)]
pub struct MiningConfig {
    /// Candidate pool size (top-k of the query's ranking).
    pub k: usize,
    /// Negatives sampled per query.
    pub per_query: usize,
    pub seed: u64,
    pub passage_instruction: String,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            k: 100,
            per_query: 1,
            seed: 0,
            passage_instruction: PASSAGE_INSTRUCTION.to_string(),
        }
    }
}

/// For every triple: rank the corpus for its query, drop passages equal to
/// the positive, and sample `per_query` negatives uniformly from the
/// remaining top-k. Sampled negatives are appended in rank order.
pub fn mine_hard_negatives(
    triples: &[TrainingTriple],
    corpus: &Corpus,
    embedder: &dyn Embedder,
    config: &MiningConfig,
) -> Result<Vec<TrainingTriple>> {
    if config.k == 0 || config.per_query == 0 {
        return Err(Error::Invalid("k and per_query must be >= 1".into()));
    }
    if corpus.len() <= config.per_query {
        return Err(Error::Invalid(format!(
            "corpus of {} documents cannot supply {} negatives per query",
            corpus.len(),
            config.per_query
        )));
    }
    if corpus.len() < config.k {
        log::warn!(
            "corpus has {} documents, fewer than k = {}; using all",
            corpus.len(),
            config.k
        );
    }
    let index = corpus_index(corpus, embedder, &config.passage_instruction)?;
    let (_, queries) = embed_queries(triples.iter().map(|t| &t.pair), embedder)?;
    triples
        .par_iter()
        .enumerate()
        .map(|(i, triple)| {
            let hits = index.search(queries.row(i), config.k)?;
            let candidates: Vec<&str> = hits
                .iter()
                .map(|(id, _)| corpus.get(id).expect("indexed id").text.as_str())
                .filter(|text| *text != triple.pair.positive)
                .collect();
            if candidates.is_empty() {
                return Err(Error::Invalid(format!(
                    "triple {i}: every candidate passage equals the positive"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let take = config.per_query.min(candidates.len());
            let mut picks = sample(&mut rng, candidates.len(), take).into_vec();
            picks.sort_unstable();
            let mut out = triple.clone();
            let mut negatives = out.hard_negatives.clone();
            for p in picks {
                let text = candidates[p].to_string();
                if !negatives.contains(&text) {
                    negatives.push(text);
                }
            }
            out.set_hard_negatives(negatives);
            Ok(out)
        })
        .collect()
}

/// For each pair, whether its positive passage ranks within the top `top`
/// results for its own query over `corpus`.
pub fn consistency_mask(
    pairs: &[TrainingPair],
    corpus: &Corpus,
    embedder: &dyn Embedder,
    top: usize,
    passage_instruction: &str,
) -> Result<Vec<bool>> {
    if top == 0 {
        return Err(Error::Invalid("top must be >= 1".into()));
    }
    let mut by_text: HashMap<&str, Vec<&str>> = HashMap::new();
    for d in corpus.iter() {
        by_text.entry(d.text.as_str()).or_default().push(d.id.as_str());
    }
    let mut targets = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let ids = match p.id.as_deref().and_then(|id| corpus.get(id)) {
            Some(doc) if doc.text == p.positive => vec![doc.id.as_str()],
            _ => by_text.get(p.positive.as_str()).cloned().unwrap_or_default(),
        };
        if ids.is_empty() {
            return Err(Error::Invalid(format!(
                "pair {i} (query `{}`): positive passage not found in corpus",
                p.query
            )));
        }
        targets.push(ids);
    }
    let index = corpus_index(corpus, embedder, passage_instruction)?;
    let (_, queries) = embed_queries(pairs.iter(), embedder)?;
    let keep: Vec<bool> = (0..pairs.len())
        .into_par_iter()
        .map(|i| {
            let hits = index.search(queries.row(i), top)?;
            Ok(hits.iter().any(|(id, _)| targets[i].contains(&id.as_str())))
        })
        .collect::<Result<_>>()?;
    Ok(keep)
}

/// Keeps a pair iff its positive passage ranks within the top `top` results
/// for its own query over `corpus`.
pub fn consistency_filter(
    pairs: &[TrainingPair],
    corpus: &Corpus,
    embedder: &dyn Embedder,
    top: usize,
    passage_instruction: &str,
) -> Result<(Vec<TrainingPair>, Vec<TrainingPair>)> {
    let keep = consistency_mask(pairs, corpus, embedder, top, passage_instruction)?;
    let mut retained = Vec::new();
    let mut dropped = Vec::new();
    for (p, k) in pairs.iter().zip(keep) {
        if k {
            retained.push(p.clone());
        } else {
            dropped.push(p.clone());
        }
    }
    Ok((retained, dropped))
}
