//! Two-stage contrastive training for a small dense retriever.
//!
//! The pipeline mirrors a modern instruction-tuned bi-encoder recipe at desk
//! scale:
//!
//! 1. [`pairgen`] builds silver query/passage pairs (title to body, disjoint
//!    crops) and converts labeled task records into instructioned triples.
//! 2. [`trainer`] runs InfoNCE pre-training with in-batch negatives, then
//!    fine-tuning with one hard negative per query, on the byte-level causal
//!    transformer in [`encoder`] (EOS pooling, analytic backward pass).
//! 3. [`mining`] mines hard negatives and applies round-trip consistency
//!    filtering; [`synth`] drives a chat-completion endpoint for synthetic
//!    tasks, examples and queries.
//! 4. [`retrieval`] does exact top-k search and [`evalmetrics`] scores runs
//!    with nDCG, Recall, MRR, MAP and Spearman.
//!
//! [`toy`] generates the bundled separable benchmark and [`pipeline`] wires
//! the stages together for end-to-end runs.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalmetrics;
pub mod io;
pub mod mining;
pub mod objective;
pub mod pairgen;
pub mod pipeline;
pub mod retrieval;
pub mod synth;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
