//! Document collections, relevance judgments and retrieval runs, with their
//! on-disk formats: JSONL corpora (`_id`, `title`, `text`), 3-column TSV
//! qrels and 6-column TREC run files.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "_id")]
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub source: String,
}

impl Document {
    pub fn new(id: impl Into<String>, title: Option<&str>, text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            title: title.map(str::to_string),
            text: text.into(),
            source: String::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::Invalid(format!("document `{}` has empty text", self.id)));
        }
        if matches!(&self.title, Some(t) if t.trim().is_empty()) {
            return Err(Error::Invalid(format!("document `{}` has an empty title", self.id)));
        }
        Ok(())
    }
}

/// An ordered, id-indexed document collection. Immutable once built.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub name: String,
    documents: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.documents == other.documents
    }
}

impl Corpus {
    pub fn new(name: impl Into<String>, documents: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            doc.validate()?;
            if by_id.insert(doc.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(doc.id.clone()));
            }
        }
        Ok(Corpus {
            name: name.into(),
            documents,
            by_id,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.documents.iter()
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.documents[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }
}

#[derive(Deserialize)]
struct RawDocument {
    #[serde(rename = "_id")]
    id: String,
    #[serde(default)]
    title: Option<String>,
    text: String,
    #[serde(default)]
    source: Option<String>,
}

/// Loads a JSONL corpus. The corpus name and default source tag are the file stem.
pub fn ingest_jsonl(path: &Path) -> Result<Corpus> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let raw: Vec<RawDocument> = io::read_jsonl(path)?;
    let documents = raw
        .into_iter()
        .map(|r| Document {
            id: r.id,
            title: r.title,
            text: r.text,
            source: r.source.unwrap_or_else(|| name.clone()),
        })
        .collect();
    Corpus::new(name, documents)
}

pub fn write_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    io::write_jsonl(path, corpus.documents())
}

/// Graded relevance judgments: query id → doc id → grade.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    pub judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) -> Result<()> {
        let entry = self.judgments.entry(query_id.to_string()).or_default();
        if entry.insert(doc_id.to_string(), grade).is_some() {
            return Err(Error::DuplicateId(format!("{query_id}/{doc_id}")));
        }
        Ok(())
    }

    pub fn get(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (q, docs) in &self.judgments {
            for (d, g) in docs {
                let _ = writeln!(out, "{q}\t{d}\t{g}");
            }
        }
        out
    }
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    let text = io::read_to_string(path)?;
    parse_qrels(&text, path)
}

pub fn parse_qrels(text: &str, path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::default();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() || (lineno == 1 && line.starts_with("query-id")) {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 3 tab-separated columns, got {}", cols.len()),
            ));
        }
        let grade: i64 = cols[2]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("grade `{}` is not an integer", cols[2])))?;
        if grade < 0 || grade > i64::from(u32::MAX) {
            return Err(Error::parse(path, lineno, format!("grade {grade} out of range")));
        }
        qrels
            .insert(cols[0].trim(), cols[1].trim(), grade as u32)
            .map_err(|_| Error::parse(path, lineno, format!("duplicate judgment ({}, {})", cols[0], cols[1])))?;
    }
    Ok(qrels)
}

pub fn write_qrels(qrels: &Qrels, path: &Path) -> Result<()> {
    io::write_atomic(path, qrels.to_tsv().as_bytes())
}

/// Ordering used for every ranked list: score descending, then doc id ascending.
pub fn rank_order(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Ranked results per query. Each list is sorted by [`rank_order`] and holds
/// no duplicate doc ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalRun {
    pub rankings: BTreeMap<String, Vec<(String, f64)>>,
}

impl RetrievalRun {
    /// Sorts `results` into canonical order and stores them under `query_id`.
    pub fn insert_unsorted(&mut self, query_id: &str, mut results: Vec<(String, f64)>) -> Result<()> {
        results.sort_by(|a, b| rank_order((&a.0, a.1), (&b.0, b.1)));
        check_ranking(query_id, &results)?;
        self.rankings.insert(query_id.to_string(), results);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (q, list) in &self.rankings {
            check_ranking(q, list)?;
        }
        Ok(())
    }

    pub fn to_trec(&self, tag: &str) -> String {
        let mut out = String::new();
        for (q, list) in &self.rankings {
            for (rank, (d, s)) in list.iter().enumerate() {
                let _ = writeln!(out, "{q} Q0 {d} {} {s} {tag}", rank + 1);
            }
        }
        out
    }
}

fn check_ranking(query_id: &str, list: &[(String, f64)]) -> Result<()> {
    let mut seen = std::collections::HashSet::with_capacity(list.len());
    for (i, (d, s)) in list.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("score of `{d}` for query `{query_id}`")));
        }
        if !seen.insert(d.as_str()) {
            return Err(Error::Invalid(format!(
                "doc `{d}` appears twice for query `{query_id}`"
            )));
        }
        if i > 0 {
            let prev = &list[i - 1];
            if rank_order((&prev.0, prev.1), (d, *s)) != Ordering::Less {
                return Err(Error::Invalid(format!(
                    "ranking for query `{query_id}` is not sorted at position {}",
                    i + 1
                )));
            }
        }
    }
    Ok(())
}

pub fn write_run(run: &RetrievalRun, path: &Path, tag: &str) -> Result<()> {
    run.validate()?;
    io::write_atomic(path, run.to_trec(tag).as_bytes())
}

pub fn read_run(path: &Path) -> Result<RetrievalRun> {
    let text = io::read_to_string(path)?;
    parse_run(&text, path)
}

pub fn parse_run(text: &str, path: &Path) -> Result<RetrievalRun> {
    let mut run = RetrievalRun::default();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 6 columns, got {}", cols.len()),
            ));
        }
        let rank: usize = cols[3]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad rank `{}`", cols[3])))?;
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad score `{}`", cols[4])))?;
        let list = run.rankings.entry(cols[0].to_string()).or_default();
        if rank != list.len() + 1 {
            return Err(Error::parse(
                path,
                lineno,
                format!(
                    "rank {rank} out of sequence for query `{}` (expected {})",
                    cols[0],
                    list.len() + 1
                ),
            ));
        }
        list.push((cols[2].to_string(), score));
        check_ranking(cols[0], list).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
    }
    Ok(run)
}
