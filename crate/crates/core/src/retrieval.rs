//! Exact brute-force top-k search over an in-memory embedding matrix.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{rank_order, Corpus, RetrievalRun};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::objective::{sim, Similarity};
use crate::pairgen::apply_template;

/// Passages are embedded in chunks of this many texts.
pub const EMBED_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    ids: Vec<String>,
    matrix: Array2<f64>,
    similarity: Similarity,
}

impl FlatIndex {
    pub fn new(ids: Vec<String>, matrix: Array2<f64>, similarity: Similarity) -> Result<Self> {
        if ids.len() != matrix.nrows() {
            return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), matrix.nrows())));
        }
        for (id, row) in ids.iter().zip(matrix.outer_iter()) {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("embedding of `{id}`")));
            }
            if similarity == Similarity::Cosine && row.dot(&row) == 0.0 {
                return Err(Error::Invalid(format!(
                    "embedding of `{id}` has zero norm (cosine index)"
                )));
            }
        }
        Ok(FlatIndex {
            ids,
            matrix,
            similarity,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn similarity(&self) -> Similarity {
        self.similarity
    }

    /// Exact top-`min(k, len)` hits, score descending, ties by ascending doc id.
    pub fn search(&self, query: ArrayView1<f64>, k: usize) -> Result<Vec<(String, f64)>> {
        if k == 0 {
            return Err(Error::Invalid("k must be >= 1".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::Shape(format!(
                "query dim {} vs index dim {}",
                query.len(),
                self.dim()
            )));
        }
        let mut scored: Vec<(usize, f64)> = Vec::with_capacity(self.len());
        for (i, row) in self.matrix.outer_iter().enumerate() {
            scored.push((i, sim(query, row, self.similarity)?));
        }
        let cmp = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
            rank_order((&self.ids[a.0], a.1), (&self.ids[b.0], b.1))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored.into_iter().map(|(i, s)| (self.ids[i].clone(), s)).collect())
    }

    /// Searches every row of `queries`; ids must be unique.
    pub fn search_many(&self, query_ids: &[String], queries: &Array2<f64>, k: usize) -> Result<RetrievalRun> {
        if query_ids.len() != queries.nrows() {
            return Err(Error::Shape(format!(
                "{} query ids for {} rows",
                query_ids.len(),
                queries.nrows()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for id in query_ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let results: Vec<Vec<(String, f64)>> = (0..queries.nrows())
            .into_par_iter()
            .map(|i| self.search(queries.row(i), k))
            .collect::<Result<_>>()?;
        let mut run = RetrievalRun::default();
        for (id, hits) in query_ids.iter().zip(results) {
            run.rankings.insert(id.clone(), hits);
        }
        Ok(run)
    }
}

/// Embeds every document body with the passage instruction.
pub fn build_index(
    corpus: &Corpus,
    params: &EncoderParams,
    passage_instruction: &str,
    similarity: Similarity,
) -> Result<FlatIndex> {
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot index an empty corpus".into()));
    }
    let texts: Vec<String> = corpus
        .iter()
        .map(|d| apply_template(passage_instruction, &d.text))
        .collect();
    let matrix = params.embed_texts(&texts, EMBED_CHUNK);
    FlatIndex::new(corpus.iter().map(|d| d.id.clone()).collect(), matrix, similarity)
}

/// One line of a queries JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    #[serde(rename = "_id")]
    pub id: String,
    pub text: String,
    #[serde(default = "default_query_instruction")]
    pub instruction: String,
}

fn default_query_instruction() -> String {
    crate::pairgen::PRETRAIN_QUERY_INSTRUCTION.to_string()
}

impl QuerySpec {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        QuerySpec {
            id: id.into(),
            text: text.into(),
            instruction: default_query_instruction(),
        }
    }
}

/// Encodes each query with its own instruction and searches the index.
pub fn batch_search(
    index: &FlatIndex,
    queries: &[QuerySpec],
    params: &EncoderParams,
    k: usize,
) -> Result<RetrievalRun> {
    if queries.is_empty() {
        return Err(Error::Invalid("no queries".into()));
    }
    let texts: Vec<String> = queries
        .iter()
        .map(|q| apply_template(&q.instruction, &q.text))
        .collect();
    let emb = params.embed_texts(&texts, EMBED_CHUNK);
    let ids: Vec<String> = queries.iter().map(|q| q.id.clone()).collect();
    index.search_many(&ids, &emb, k)
}
