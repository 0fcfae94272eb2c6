//! Synthetic training data from a chat-completion model.
//!
//! Three generators share one [`ChatClient`]:
//!
//! * [`generate_tasks`] brainstorms retrieval task descriptions,
//! * [`generate_example`] writes one (query, positive, hard negative) example
//!   for a task under randomly sampled [`SynthKnobs`],
//! * [`generate_instance_query`] writes a query for an existing passage.
//!
//! Unparseable replies are retried and finally reported as a discard, never
//! as an error. Transport failures are errors. [`StubClient`] answers every
//! prompt deterministically so the whole stage runs offline.

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{Corpus, Document};
use crate::pairgen::{Origin, TrainingPair, TrainingTriple, PASSAGE_INSTRUCTION};

pub const TASK_PROMPT: &str = "Brainstorm a list of potentially useful biomedical text retrieval tasks.

Here are a few examples for your reference:
1. Provided a scientific claim as query, retrieve documents that help verify or refute the claim.
2. Search for documents that answers a FAQ-style query on children's nutrition.

Please adhere to the following guidelines:
1. Specify what the query is, and what the desired documents are.
2. Each retrieval task should cover a wide range of queries, and should not be too specific.
3. Focus on biomedical related topics.

Your output should always be a python list of strings only, with about 20 elements, and each element corresponds to a distinct retrieval task in one sentence. Do not explain yourself or output anything else. Be creative!";

pub const EXAMPLE_PROMPT_TEMPLATE: &str = "You have been assigned a biomedical retrieval task: [task]

Your mission is to write one biomedical text retrieval example for this task in JSON format. The JSON object must contain the following keys:
1. \"user_query\": a string, a random user search query specified by the retrieval task.
2. \"positive_document\": a string, a relevant document for the user query.
3. \"hard_negative_document\": a string, a hard negative document that only appears relevant to the query.

Please adhere to the following guidelines:
1. The \"user_query\" should be [query_type], [query_length], [clarity], and diverse in topic.
2. All documents should be at least [num_words] words long.
3. Both the query and documents should be in English.
4. Both the query and documents require [difficulty] level education to understand.

Your output must always be a JSON object only, do not explain yourself or output anything else. Be creative!";

pub const QUERY_PROMPT_TEMPLATE: &str = "Write one search query that a user could type to find the following biomedical passage. Output the query text only.

Passage: [passage]";

const EXAMPLE_KEYS: [&str; 3] = ["user_query", "positive_document", "hard_negative_document"];

pub const QUERY_TYPES: [&str; 3] = ["extremely long-tail", "long-tail", "common"];
pub const QUERY_LENGTHS: [&str; 3] = ["less than 5 words", "5-10 words", "at least 10 words"];
pub const CLARITIES: [&str; 3] = ["clear", "understandable with some effort", "ambiguous"];
pub const NUM_WORDS: [&str; 5] = ["50 words", "50-100 words", "200 words", "300 words", "400 words"];
pub const DIFFICULTIES: [&str; 3] = ["high school", "college", "PhD"];

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_RETRIES: usize = 3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("chat endpoint: {0}")]
    Transport(String),

    #[error("reply is not a list of strings after {attempts} attempt(s); last reply: {reply:?}")]
    UnparseableList { attempts: usize, reply: String },

    #[error("synth: {0}")]
    Invalid(String),
}

impl SynthError {
    pub fn is_transport(&self) -> bool {
        matches!(self, SynthError::Transport(_))
    }
}

type SynthResult<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub prompt: String,
    pub temperature: f64,
    /// Forwarded to the endpoint; also drives [`StubClient`].
    pub seed: u64,
}

pub trait ChatClient: Sync {
    fn complete(&self, request: &ChatRequest) -> SynthResult<String>;
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, request: &ChatRequest) -> SynthResult<String> {
        (**self).complete(request)
    }
}

/// Client for an OpenAI-style `/chat/completions` endpoint.
pub struct HttpChatClient {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    token: Option<String>,
    transport_retries: usize,
}

impl HttpChatClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, token: Option<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build();
        HttpChatClient {
            agent: ureq::Agent::new_with_config(config),
            endpoint: endpoint.into(),
            model: model.into(),
            token,
            transport_retries: 2,
        }
    }

    /// Reads the bearer token from `env_var`; an unset variable means no auth header.
    pub fn from_env(endpoint: impl Into<String>, model: impl Into<String>, env_var: &str) -> Self {
        let token = std::env::var(env_var).ok().filter(|t| !t.is_empty());
        if token.is_none() {
            log::warn!("{env_var} is not set; sending requests without authorization");
        }
        Self::new(endpoint, model, token)
    }

    pub fn with_transport_retries(mut self, retries: usize) -> Self {
        self.transport_retries = retries;
        self
    }

    fn request_body(&self, request: &ChatRequest) -> Value {
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "seed": request.seed,
        })
    }

    fn send_once(&self, body: &Value) -> SynthResult<String> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let reply: Value = req
            .send_json(body)
            .map_err(|e| SynthError::Transport(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| SynthError::Transport(format!("bad response body: {e}")))?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| SynthError::Transport(format!("response has no message content: {reply}")))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> SynthResult<String> {
        let body = self.request_body(request);
        let mut attempt = 0;
        loop {
            match self.send_once(&body) {
                Ok(text) => return Ok(text),
                Err(e) if attempt < self.transport_retries => {
                    attempt += 1;
                    log::warn!("{e}; retrying ({attempt}/{})", self.transport_retries);
                    std::thread::sleep(Duration::from_millis(500 * (1 << attempt)));
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Offline client whose replies depend only on the prompt and seed.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubClient;

const STUB_SUBJECTS: [&str; 10] = [
    "sepsis",
    "asthma",
    "obesity",
    "malaria",
    "influenza",
    "dementia",
    "anemia",
    "melanoma",
    "hepatitis",
    "migraine",
];
const STUB_DOCUMENTS: [&str; 6] = [
    "case reports",
    "clinical trials",
    "review articles",
    "guidelines",
    "cohort studies",
    "patient forum answers",
];
const STUB_ANGLES: [&str; 6] = [
    "treatment outcomes",
    "risk factors",
    "diagnostic criteria",
    "long-term complications",
    "prevention strategies",
    "genetic markers",
];

impl StubClient {
    fn tasks(seed: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tasks: Vec<String> = (0..20)
            .map(|_| {
                format!(
                    "Given a question about {} in {}, retrieve {} that address it.",
                    STUB_ANGLES.choose(&mut rng).unwrap(),
                    STUB_SUBJECTS.choose(&mut rng).unwrap(),
                    STUB_DOCUMENTS.choose(&mut rng).unwrap(),
                )
            })
            .collect();
        serde_json::to_string(&tasks).expect("strings serialize")
    }

    fn example(prompt: &str, seed: u64) -> String {
        let task = prompt
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("You have been assigned a biomedical retrieval task: "))
            .unwrap_or("")
            .trim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subject = STUB_SUBJECTS.choose(&mut rng).unwrap();
        let angle = STUB_ANGLES.choose(&mut rng).unwrap();
        let other = STUB_ANGLES.iter().filter(|a| *a != angle).collect::<Vec<_>>();
        let other = other.choose(&mut rng).unwrap();
        json!({
            "user_query": format!("{angle} of {subject}"),
            "positive_document": format!(
                "This passage reports {angle} of {subject}. It was written for the task: {task}"
            ),
            "hard_negative_document": format!(
                "This passage mentions {subject} but reports {other} instead of {angle}."
            ),
        })
        .to_string()
    }

    fn query(prompt: &str) -> String {
        let passage = prompt.rsplit_once("Passage: ").map_or("", |(_, p)| p);
        passage.split_whitespace().take(5).collect::<Vec<_>>().join(" ")
    }
}

impl ChatClient for StubClient {
    fn complete(&self, request: &ChatRequest) -> SynthResult<String> {
        let prompt = request.prompt.as_str();
        Ok(if prompt == TASK_PROMPT {
            Self::tasks(request.seed)
        } else if prompt.starts_with("You have been assigned") {
            Self::example(prompt, request.seed)
        } else if prompt.starts_with("Write one search query") {
            Self::query(prompt)
        } else {
            String::new()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthKnobs {
    pub query_type: String,
    pub query_length: String,
    pub clarity: String,
    pub num_words: String,
    pub difficulty: String,
}

/// Draws every knob independently and uniformly from its option set.
pub fn sample_knobs(seed: u64) -> SynthKnobs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |options: &[&str]| options[rng.random_range(0..options.len())].to_string();
    SynthKnobs {
        query_type: pick(&QUERY_TYPES),
        query_length: pick(&QUERY_LENGTHS),
        clarity: pick(&CLARITIES),
        num_words: pick(&NUM_WORDS),
        difficulty: pick(&DIFFICULTIES),
    }
}

pub fn example_prompt(task: &str, knobs: &SynthKnobs) -> String {
    EXAMPLE_PROMPT_TEMPLATE
        .replace("[task]", task)
        .replace("[query_type]", &knobs.query_type)
        .replace("[query_length]", &knobs.query_length)
        .replace("[clarity]", &knobs.clarity)
        .replace("[num_words]", &knobs.num_words)
        .replace("[difficulty]", &knobs.difficulty)
}

pub fn query_prompt(passage: &str) -> String {
    QUERY_PROMPT_TEMPLATE.replace("[passage]", passage)
}

/// Seed for item `index` of a batch drawn from `seed`.
pub fn item_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

fn strip_fences(reply: &str) -> &str {
    let t = reply.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

/// Parses a JSON array or Python list literal of strings.
pub fn parse_string_list(reply: &str) -> Option<Vec<String>> {
    let body = strip_fences(reply);
    let start = body.find('[')?;
    let end = body.rfind(']')?;
    if end < start {
        return None;
    }
    let slice = &body[start..=end];
    if let Ok(list) = serde_json::from_str::<Vec<String>>(slice) {
        return Some(list);
    }
    parse_python_list(slice)
}

fn parse_python_list(src: &str) -> Option<Vec<String>> {
    let mut chars = src.chars().peekable();
    if chars.next()? != '[' {
        return None;
    }
    let mut out = Vec::new();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        match chars.next()? {
            ']' => return Some(out),
            quote @ ('\'' | '"') => {
                let mut s = String::new();
                loop {
                    match chars.next()? {
                        '\\' => match chars.next()? {
                            'n' => s.push('\n'),
                            't' => s.push('\t'),
                            c => s.push(c),
                        },
                        c if c == quote => break,
                        c => s.push(c),
                    }
                }
                out.push(s);
                while chars.peek().is_some_and(|c| c.is_whitespace()) {
                    chars.next();
                }
                match chars.next()? {
                    ',' => {}
                    ']' => return Some(out),
                    _ => return None,
                }
            }
            _ => return None,
        }
    }
}

/// Brainstorms up to `count` distinct tasks by re-issuing the task prompt
/// with fresh seeds. Stops early after three rounds that add nothing new.
pub fn generate_tasks(client: &dyn ChatClient, count: usize, retries: usize, seed: u64) -> SynthResult<Vec<String>> {
    let mut seen = HashSet::new();
    let mut tasks = Vec::new();
    let mut stale = 0;
    let mut round = 0u64;
    while tasks.len() < count && stale < 3 {
        let mut parsed = None;
        let mut last = String::new();
        for attempt in 0..=retries {
            let request = ChatRequest {
                prompt: TASK_PROMPT.to_string(),
                temperature: DEFAULT_TEMPERATURE,
                seed: item_seed(seed, round * (retries as u64 + 1) + attempt as u64),
            };
            last = client.complete(&request)?;
            if let Some(list) = parse_string_list(&last) {
                parsed = Some(list);
                break;
            }
            log::debug!("task reply not a list (attempt {})", attempt + 1);
        }
        let list = parsed.ok_or(SynthError::UnparseableList {
            attempts: retries + 1,
            reply: last,
        })?;
        let before = tasks.len();
        for task in list {
            let task = task.trim().to_string();
            if !task.is_empty() && tasks.len() < count && seen.insert(task.clone()) {
                tasks.push(task);
            }
        }
        stale = if tasks.len() == before { stale + 1 } else { 0 };
        round += 1;
    }
    if tasks.len() < count {
        log::warn!("only {} distinct tasks after {round} rounds", tasks.len());
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthExample {
    pub user_query: String,
    pub positive_document: String,
    pub hard_negative_document: String,
    pub task: String,
}

impl SynthExample {
    /// Fine-tuning triple whose query instruction is the task description.
    pub fn to_triple(&self) -> TrainingTriple {
        let mut pair = TrainingPair::new(&self.user_query, &self.positive_document, Origin::Synthetic);
        pair.instruction.query_instruction = self.task.clone();
        TrainingTriple::new(pair, vec![self.hard_negative_document.clone()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome<T> {
    Accepted(T),
    Discarded { attempts: usize, last_reply: String },
}

impl<T> Outcome<T> {
    pub fn accepted(self) -> Option<T> {
        match self {
            Outcome::Accepted(v) => Some(v),
            Outcome::Discarded { .. } => None,
        }
    }
}

/// Accepts a JSON object with exactly the three example keys, all non-empty
/// strings, and distinct documents.
pub fn parse_example(reply: &str, task: &str) -> Option<SynthExample> {
    let body = strip_fences(reply);
    let start = body.find('{')?;
    let end = body.rfind('}')?;
    if end < start {
        return None;
    }
    let Value::Object(map) = serde_json::from_str::<Value>(&body[start..=end]).ok()? else {
        return None;
    };
    if map.len() != EXAMPLE_KEYS.len() {
        return None;
    }
    let field = |k: &str| {
        map.get(k)
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
    };
    let example = SynthExample {
        user_query: field(EXAMPLE_KEYS[0])?,
        positive_document: field(EXAMPLE_KEYS[1])?,
        hard_negative_document: field(EXAMPLE_KEYS[2])?,
        task: task.to_string(),
    };
    (example.positive_document != example.hard_negative_document).then_some(example)
}

pub fn generate_example(
    client: &dyn ChatClient,
    task: &str,
    knobs: &SynthKnobs,
    retries: usize,
    seed: u64,
) -> SynthResult<Outcome<SynthExample>> {
    if task.trim().is_empty() {
        return Err(SynthError::Invalid("task must be non-empty".into()));
    }
    let prompt = example_prompt(task, knobs);
    let mut last = String::new();
    for attempt in 0..=retries {
        let request = ChatRequest {
            prompt: prompt.clone(),
            temperature: DEFAULT_TEMPERATURE,
            seed: item_seed(seed, attempt as u64),
        };
        last = client.complete(&request)?;
        if let Some(example) = parse_example(&last, task) {
            return Ok(Outcome::Accepted(example));
        }
        log::debug!("example reply rejected (attempt {})", attempt + 1);
    }
    Ok(Outcome::Discarded {
        attempts: retries + 1,
        last_reply: last,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryDomain {
    Pubmed,
    Covid,
}

impl QueryDomain {
    pub fn instruction(self) -> &'static str {
        match self {
            QueryDomain::Pubmed => "Given a question, retrieve Pubmed passages that answer the question.",
            QueryDomain::Covid => {
                "Given a query on COVID-19, retrieve COVID-19 related articles that answer the query."
            }
        }
    }
}

impl std::str::FromStr for QueryDomain {
    type Err = SynthError;

    fn from_str(s: &str) -> SynthResult<Self> {
        match s {
            "pubmed" => Ok(QueryDomain::Pubmed),
            "covid" => Ok(QueryDomain::Covid),
            other => Err(SynthError::Invalid(format!("unknown domain `{other}` (pubmed|covid)"))),
        }
    }
}

fn clean_query(reply: &str) -> String {
    let line = strip_fences(reply)
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("");
    let unquote = |s: &str| s.trim_matches(|c| c == '"' || c == '\'').trim().to_string();
    let line = unquote(line);
    unquote(line.strip_prefix("Query:").unwrap_or(&line))
}

pub fn generate_instance_query(
    client: &dyn ChatClient,
    passage: &str,
    domain: QueryDomain,
    retries: usize,
    seed: u64,
) -> SynthResult<Outcome<TrainingPair>> {
    if passage.trim().is_empty() {
        return Err(SynthError::Invalid("passage must be non-empty".into()));
    }
    let prompt = query_prompt(passage);
    let mut last = String::new();
    for attempt in 0..=retries {
        let request = ChatRequest {
            prompt: prompt.clone(),
            temperature: DEFAULT_TEMPERATURE,
            seed: item_seed(seed, attempt as u64),
        };
        last = client.complete(&request)?;
        let query = clean_query(&last);
        if !query.is_empty() {
            let mut pair = TrainingPair::new(query, passage, Origin::Synthetic);
            pair.instruction.query_instruction = domain.instruction().to_string();
            pair.instruction.passage_instruction = PASSAGE_INSTRUCTION.to_string();
            return Ok(Outcome::Accepted(pair));
        }
    }
    Ok(Outcome::Discarded {
        attempts: retries + 1,
        last_reply: last,
    })
}

/// Runs `f` over `items` with at most `limit` calls in flight; results keep
/// input order.
pub fn map_bounded<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = limit.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub retries: usize,
    pub max_in_flight: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            retries: DEFAULT_RETRIES,
            max_in_flight: 4,
            seed: 0,
        }
    }
}

/// Generates `count` examples, cycling through `tasks`. Knobs and request
/// seeds depend only on the item index. Discards are dropped; the second
/// value counts them.
pub fn generate_examples(
    client: &dyn ChatClient,
    tasks: &[String],
    count: usize,
    config: &SynthConfig,
) -> SynthResult<(Vec<SynthExample>, usize)> {
    if tasks.is_empty() {
        return Err(SynthError::Invalid("no tasks to generate examples for".into()));
    }
    let indices: Vec<usize> = (0..count).collect();
    let results = map_bounded(&indices, config.max_in_flight, |_, &i| {
        let s = item_seed(config.seed, i as u64);
        let knobs = sample_knobs(s);
        generate_example(client, &tasks[i % tasks.len()], &knobs, config.retries, s)
    });
    collect_outcomes(results)
}

/// Generates one query per document; pairs carry the document id.
pub fn generate_corpus_queries(
    client: &dyn ChatClient,
    documents: &[&Document],
    domain: QueryDomain,
    config: &SynthConfig,
) -> SynthResult<(Vec<TrainingPair>, usize)> {
    let results = map_bounded(documents, config.max_in_flight, |i, d| {
        let out = generate_instance_query(
            client,
            &d.text,
            domain,
            config.retries,
            item_seed(config.seed, i as u64),
        )?;
        Ok(match out {
            Outcome::Accepted(mut pair) => {
                pair.id = Some(d.id.clone());
                Outcome::Accepted(pair)
            }
            discarded => discarded,
        })
    });
    collect_outcomes(results)
}

/// `count` documents drawn without replacement, in corpus order.
pub fn sample_documents(corpus: &Corpus, count: usize, seed: u64) -> Vec<&Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, corpus.len(), count.min(corpus.len())).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| &corpus.documents()[i]).collect()
}

/// One line of a tasks JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: String,
}

fn collect_outcomes<T>(results: Vec<SynthResult<Outcome<T>>>) -> SynthResult<(Vec<T>, usize)> {
    let mut kept = Vec::new();
    let mut discarded = 0;
    for r in results {
        match r? {
            Outcome::Accepted(v) => kept.push(v),
            Outcome::Discarded { attempts, last_reply } => {
                log::warn!("discarded after {attempts} attempt(s): {last_reply:?}");
                discarded += 1;
            }
        }
    }
    Ok((kept, discarded))
}
