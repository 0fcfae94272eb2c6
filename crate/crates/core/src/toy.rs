//! A small separable retrieval benchmark.
//!
//! Each topic spells its words with its own three letters, so topics share no
//! vocabulary. Topics split into subtopics whose private words end in a
//! subtopic digit; documents mix private words with a topic-wide list.
//! Held-out queries are judged 2 for documents of their subtopic and 1 for
//! the rest of their topic.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Corpus, Document, Qrels};
use crate::error::{Error, Result};
use crate::io::write_jsonl;
use crate::pairgen::{attach_instructions, convert_qa_records, QaRecord, TrainingTriple, PRETRAIN_QUERY_INSTRUCTION};
use crate::retrieval::QuerySpec;

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwx";
const LETTERS_PER_TOPIC: usize = 3;
const SUBTOPIC_MARKS: &[u8] = b"0123456789";

/// Query instruction for held-out queries and the QA training set. It matches
/// the pre-training instruction so both stages are scored on the same prompt.
pub const TOY_QUERY_INSTRUCTION: &str = PRETRAIN_QUERY_INSTRUCTION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub topics: usize,
    pub subtopics: usize,
    pub docs_per_subtopic: usize,
    pub queries_per_subtopic: usize,
    pub train_questions_per_subtopic: usize,
    pub words_per_subtopic: usize,
    pub topic_words: usize,
    pub doc_words: usize,
    pub query_words: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            topics: 8,
            subtopics: 5,
            docs_per_subtopic: 10,
            queries_per_subtopic: 2,
            train_questions_per_subtopic: 8,
            words_per_subtopic: 8,
            topic_words: 12,
            doc_words: 10,
            query_words: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyBenchmark {
    pub corpus: Corpus,
    pub queries: Vec<QuerySpec>,
    pub qrels: Qrels,
    pub qa: Vec<QaRecord>,
}

impl ToyBenchmark {
    /// Fine-tuning triples from the QA records, without negatives.
    pub fn training_triples(&self) -> Vec<TrainingTriple> {
        let records: Vec<(String, String)> = self.qa.iter().map(|r| (r.question.clone(), r.answer.clone())).collect();
        let mut triples = convert_qa_records(&records);
        attach_instructions(&mut triples, TOY_QUERY_INSTRUCTION).expect("non-empty constant");
        triples
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        corpus::write_jsonl(&self.corpus, &dir.join("corpus.jsonl"))?;
        write_jsonl(&dir.join("queries.jsonl"), &self.queries)?;
        corpus::write_qrels(&self.qrels, &dir.join("qrels.tsv"))?;
        write_jsonl(&dir.join("qa.jsonl"), &self.qa)?;
        Ok(())
    }
}

fn topic_word(letters: &[u8], rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(3..=6);
    (0..len).map(|_| *letters.choose(rng).unwrap() as char).collect()
}

fn words_from(pool: &[String], n: usize, rng: &mut ChaCha8Rng) -> String {
    (0..n)
        .map(|_| pool.choose(rng).unwrap().as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn generate(config: &ToyConfig) -> Result<ToyBenchmark> {
    if config.topics == 0 || config.topics * LETTERS_PER_TOPIC > ALPHABET.len() {
        return Err(Error::Invalid(format!(
            "topics must be in 1..={}",
            ALPHABET.len() / LETTERS_PER_TOPIC
        )));
    }
    if config.subtopics == 0 || config.docs_per_subtopic == 0 || config.words_per_subtopic == 0 {
        return Err(Error::Invalid(
            "subtopics, docs and words per subtopic must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut docs = Vec::new();
    let mut queries = Vec::new();
    let mut qrels = Qrels::default();
    let mut qa = Vec::new();

    for t in 0..config.topics {
        let letters = &ALPHABET[t * LETTERS_PER_TOPIC..(t + 1) * LETTERS_PER_TOPIC];
        let mut used = BTreeSet::new();
        let mut fresh = |n: usize, rng: &mut ChaCha8Rng| -> Vec<String> {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let w = topic_word(letters, rng);
                if used.insert(w.clone()) {
                    out.push(w);
                }
            }
            out
        };
        let shared = fresh(config.topic_words, &mut rng);
        let private: Vec<Vec<String>> = (0..config.subtopics)
            .map(|s| {
                fresh(config.words_per_subtopic, &mut rng)
                    .into_iter()
                    .map(|w| format!("{w}{}", SUBTOPIC_MARKS[s % SUBTOPIC_MARKS.len()] as char))
                    .collect()
            })
            .collect();

        let mut topic_docs: Vec<Vec<String>> = Vec::new();
        for (s, own) in private.iter().enumerate() {
            let mut ids = Vec::new();
            for d in 0..config.docs_per_subtopic {
                let id = format!("t{t}s{s}d{d:02}");
                let own_count = config.doc_words - config.doc_words / 3;
                let mut words: Vec<&str> = (0..config.doc_words)
                    .map(|i| {
                        let pool = if i < own_count { own } else { &shared };
                        pool.choose(&mut rng).unwrap().as_str()
                    })
                    .collect();
                for i in (1..words.len()).rev() {
                    let j = rng.random_range(0..=i);
                    words.swap(i, j);
                }
                let title = words_from(own, 2, &mut rng);
                docs.push(Document::new(&id, Some(&title), words.join(" ")));
                ids.push(id);
            }
            topic_docs.push(ids);
        }
        for (s, own) in private.iter().enumerate() {
            for j in 0..config.queries_per_subtopic {
                let qid = format!("q-t{t}s{s}-{j}");
                let mut q = QuerySpec::new(&qid, words_from(own, config.query_words, &mut rng));
                q.instruction = TOY_QUERY_INSTRUCTION.to_string();
                queries.push(q);
                for (s2, ids) in topic_docs.iter().enumerate() {
                    for id in ids {
                        qrels.insert(&qid, id, if s2 == s { 2 } else { 1 })?;
                    }
                }
            }
            for _ in 0..config.train_questions_per_subtopic {
                let answer_id = topic_docs[s].choose(&mut rng).unwrap();
                let answer = docs.iter().find(|d| &d.id == answer_id).unwrap().text.clone();
                qa.push(QaRecord {
                    question: words_from(own, config.query_words, &mut rng),
                    answer,
                });
            }
        }
    }
    Ok(ToyBenchmark {
        corpus: Corpus::new("toy", docs)?,
        queries,
        qrels,
        qa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape() {
        let b = generate(&ToyConfig::default()).unwrap();
        assert_eq!(b.corpus.len(), 400);
        assert_eq!(b.queries.len(), 80);
        assert_eq!(b.qa.len(), 320);
        for q in &b.queries {
            let j = b.qrels.get(&q.id).unwrap();
            assert_eq!(j.len(), 50);
            assert_eq!(j.values().filter(|&&g| g == 2).count(), 10);
        }
    }

    #[test]
    fn topics_share_no_letters() {
        let b = generate(&ToyConfig::default()).unwrap();
        for d in b.corpus.iter() {
            let t = d.id[1..2].parse::<usize>().unwrap();
            let letters = &ALPHABET[t * 3..t * 3 + 3];
            assert!(
                d.text
                    .bytes()
                    .all(|c| c == b' ' || c.is_ascii_digit() || letters.contains(&c)),
                "{}",
                d.id
            );
        }
    }

    #[test]
    fn seeded() {
        let a = generate(&ToyConfig::default()).unwrap();
        let b = generate(&ToyConfig::default()).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.queries, b.queries);
        let c = generate(&ToyConfig {
            seed: 1,
            ..ToyConfig::default()
        })
        .unwrap();
        assert_ne!(a.corpus, c.corpus);
    }
}
