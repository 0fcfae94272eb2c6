//! Two-stage training loop: InfoNCE pre-training with in-batch negatives and
//! fine-tuning with one sampled hard negative per query, optimized with AdamW
//! under a linear warmup schedule.

use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{backward_batch, forward_batch, EncoderConfig, EncoderParams, Gradients, Weights};
use crate::error::{Error, Result};
use crate::objective::{grad_wrt_embeddings, loss_cpt, loss_ft, score_matrix, LossConfig, Similarity};
use crate::pairgen::{TrainingPair, TrainingTriple};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Warmup, then linear decay to zero at the last step.
    Linear,
    /// Warmup, then constant.
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub seed: u64,
    /// Emit a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub schedule: Schedule,
    /// Architecture used when training starts from fresh weights.
    pub model: EncoderConfig,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        TrainConfig {
            stage,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: match stage {
                Stage::Pretrain => 2,
                Stage::Finetune => 1,
            },
            warmup_steps: 100,
            weight_decay: 0.01,
            loss: LossConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            schedule: Schedule::Linear,
            model: EncoderConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Invalid("batch_size must be >= 2".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Invalid("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Invalid("weight_decay must be >= 0".into()));
        }
        self.loss.validate()
    }

    /// Parses `key = value` lines. `#` starts a comment; unknown keys are errors.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut stage = None;
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("line {}: expected key = value", idx + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "stage" {
                stage = Some(match value {
                    "pretrain" => Stage::Pretrain,
                    "finetune" => Stage::Finetune,
                    other => return Err(Error::Invalid(format!("line {}: unknown stage `{other}`", idx + 1))),
                });
            } else {
                entries.push((idx + 1, key.to_string(), value.to_string()));
            }
        }
        let mut cfg = TrainConfig::new(stage.unwrap_or(Stage::Pretrain));
        for (line, key, value) in entries {
            let bad = |what: &str| Error::Invalid(format!("line {line}: invalid {what} `{value}`"));
            match key.as_str() {
                "learning_rate" => cfg.learning_rate = value.parse().map_err(|_| bad("learning_rate"))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad("epochs"))?,
                "warmup_steps" => cfg.warmup_steps = value.parse().map_err(|_| bad("warmup_steps"))?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad("weight_decay"))?,
                "temperature" | "tau" => cfg.loss.temperature = value.parse().map_err(|_| bad("temperature"))?,
                "similarity" => cfg.loss.similarity = value.parse::<Similarity>()?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "checkpoint_every" => cfg.checkpoint_every = value.parse().map_err(|_| bad("checkpoint_every"))?,
                "schedule" => {
                    cfg.schedule = match value.as_str() {
                        "linear" => Schedule::Linear,
                        "constant" => Schedule::Constant,
                        _ => return Err(bad("schedule")),
                    }
                }
                "d_model" => cfg.model.d_model = value.parse().map_err(|_| bad("d_model"))?,
                "n_layers" => cfg.model.n_layers = value.parse().map_err(|_| bad("n_layers"))?,
                "n_heads" => cfg.model.n_heads = value.parse().map_err(|_| bad("n_heads"))?,
                "max_seq_len" => cfg.model.max_seq_len = value.parse().map_err(|_| bad("max_seq_len"))?,
                other => return Err(Error::Invalid(format!("line {line}: unknown key `{other}`"))),
            }
        }
        cfg.model.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "stage = {}\nlearning_rate = {}\nbatch_size = {}\nepochs = {}\nwarmup_steps = {}\nweight_decay = {}\n\
             temperature = {}\nsimilarity = {}\nseed = {}\ncheckpoint_every = {}\nschedule = {}\n\
             d_model = {}\nn_layers = {}\nn_heads = {}\nmax_seq_len = {}\n",
            match self.stage {
                Stage::Pretrain => "pretrain",
                Stage::Finetune => "finetune",
            },
            self.learning_rate,
            self.batch_size,
            self.epochs,
            self.warmup_steps,
            self.weight_decay,
            self.loss.temperature,
            self.loss.similarity,
            self.seed,
            self.checkpoint_every,
            match self.schedule {
                Schedule::Linear => "linear",
                Schedule::Constant => "constant",
            },
            self.model.d_model,
            self.model.n_layers,
            self.model.n_heads,
            self.model.max_seq_len,
        )
    }
}

/// Learning rate at 1-based `step` out of `total_steps`.
///
/// Linear warmup to the peak over `warmup_steps`, then (for the linear
/// schedule) linear decay reaching zero at `total_steps`. When the run is no
/// longer than the warmup, the schedule never leaves the warmup ramp.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let peak = config.learning_rate;
    let warmup = config.warmup_steps;
    if warmup > 0 && step <= warmup {
        return peak * step as f64 / warmup as f64;
    }
    match config.schedule {
        Schedule::Constant => peak,
        Schedule::Linear => {
            if total_steps <= warmup {
                return peak;
            }
            let remaining = total_steps.saturating_sub(step) as f64;
            peak * remaining / (total_steps - warmup) as f64
        }
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Weights,
    pub second_moment: Weights,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: &EncoderConfig) -> Self {
        OptimizerState {
            first_moment: Weights::zeros(config),
            second_moment: Weights::zeros(config),
            step: 0,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn adamw_step(
    params: &mut Weights,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads.tensors() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first_moment.tensors_mut())
        .zip(state.second_moment.tensors_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
        for i in 0..p.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] *= decay;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,epoch,lr,loss";

    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.step, self.epoch, self.lr, self.loss)
    }
}

impl fmt::Display for LossRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {} epoch {} lr {:.3e} loss {:.6}",
            self.step, self.epoch, self.lr, self.loss
        )
    }
}

/// Callbacks invoked by the training loops.
pub trait TrainingHooks {
    fn on_step(&mut self, _record: &LossRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: usize, _params: &EncoderParams) -> Result<()> {
        Ok(())
    }
}

impl TrainingHooks for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub records: Vec<LossRecord>,
}

fn embed_and_split(
    params: &EncoderParams,
    texts: &[String],
    want_grad: bool,
) -> Result<(Array2<f64>, Option<crate::encoder::BatchCache>)> {
    let seqs: Vec<_> = texts.iter().map(|t| params.tokenize(t)).collect();
    let (emb, cache) = forward_batch(params, &seqs)?;
    Ok((emb, want_grad.then_some(cache)))
}

fn batch_objective(
    params: &EncoderParams,
    queries: Vec<String>,
    candidates: Vec<String>,
    loss: &LossConfig,
    finetune: bool,
    want_grad: bool,
) -> Result<(f64, Option<Gradients>)> {
    let n = queries.len();
    let mut texts = queries;
    texts.extend(candidates);
    let (emb, cache) = embed_and_split(params, &texts, want_grad)?;
    let q = emb.slice(s![..n, ..]).to_owned();
    let p = emb.slice(s![n.., ..]).to_owned();
    let scores = score_matrix(&q, &p, loss.similarity)?;
    let (value, grad_s) = if finetune {
        loss_ft(&scores, loss.temperature)?
    } else {
        loss_cpt(&scores, loss.temperature)?
    };
    let Some(cache) = cache else {
        return Ok((value, None));
    };
    let (gq, gp) = grad_wrt_embeddings(&q, &p, &grad_s, loss.similarity)?;
    let upstream = concatenate(Axis(0), &[gq.view(), gp.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((value, Some(backward_batch(params, &cache, &upstream)?)))
}

/// Pre-training loss and parameter gradient for one batch of pairs.
pub fn pretrain_batch(
    params: &EncoderParams,
    pairs: &[&TrainingPair],
    loss: &LossConfig,
    want_grad: bool,
) -> Result<(f64, Option<Gradients>)> {
    let queries = pairs.iter().map(|p| p.formatted_query()).collect();
    let positives = pairs.iter().map(|p| p.formatted_positive()).collect();
    batch_objective(params, queries, positives, loss, false, want_grad)
}

/// Fine-tuning loss and gradient for `(pair, chosen hard negative)` items.
pub fn finetune_batch(
    params: &EncoderParams,
    items: &[(&TrainingPair, &str)],
    loss: &LossConfig,
    want_grad: bool,
) -> Result<(f64, Option<Gradients>)> {
    let queries = items.iter().map(|(p, _)| p.formatted_query()).collect();
    let mut candidates: Vec<String> = items.iter().map(|(p, _)| p.formatted_positive()).collect();
    candidates.extend(items.iter().map(|(p, neg)| p.instruction.format_passage(neg)));
    batch_objective(params, queries, candidates, loss, true, want_grad)
}

fn warn_duplicate_positives(step: usize, positives: impl Iterator<Item = String>) {
    let mut seen = HashSet::new();
    for p in positives {
        if !seen.insert(p) {
            static WARNED: AtomicBool = AtomicBool::new(false);
            if WARNED.swap(true, Ordering::Relaxed) {
                log::debug!("step {step}: duplicate positive passages in batch");
            } else {
                log::warn!(
                    "step {step}: duplicate positive passages in batch are treated as distinct candidates \
                     (further occurrences logged at debug level)"
                );
            }
            return;
        }
    }
}

fn run_loop<F>(
    config: &TrainConfig,
    n_items: usize,
    init: EncoderParams,
    hooks: &mut dyn TrainingHooks,
    mut batch_step: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EncoderParams, &[usize], &mut ChaCha8Rng, usize) -> Result<(f64, Gradients)>,
{
    config.validate()?;
    if n_items < config.batch_size {
        return Err(Error::Invalid(format!(
            "need at least batch_size ({}) training items, got {n_items}",
            config.batch_size
        )));
    }
    let steps_per_epoch = n_items / config.batch_size;
    let total = steps_per_epoch * config.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init;
    let mut state = OptimizerState::new(&params.config);
    let mut records = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks_exact(config.batch_size) {
            step += 1;
            let (loss, grads) = batch_step(&params, batch, &mut rng, step)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }
            let lr = lr_at(step, total, config);
            adamw_step(&mut params.weights, &grads, &mut state, lr, config.weight_decay)
                .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
            let record = LossRecord { step, epoch, lr, loss };
            log::debug!("{record}");
            hooks.on_step(&record)?;
            records.push(record);
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                hooks.on_checkpoint(step, &params)?;
            }
        }
    }
    Ok(TrainOutcome { params, records })
}

/// Contrastive pre-training. Pairs are reshuffled each epoch; the tail batch
/// is dropped.
pub fn run_pretrain(
    config: &TrainConfig,
    pairs: &[TrainingPair],
    init: EncoderParams,
    hooks: &mut dyn TrainingHooks,
) -> Result<TrainOutcome> {
    run_loop(config, pairs.len(), init, hooks, |params, batch, _rng, step| {
        let items: Vec<&TrainingPair> = batch.iter().map(|&i| &pairs[i]).collect();
        warn_duplicate_positives(step, items.iter().map(|p| p.positive.clone()));
        let (loss, grads) = pretrain_batch(params, &items, &config.loss, true)?;
        Ok((loss, grads.expect("gradient requested")))
    })
}

/// Fine-tuning with one hard negative per triple, sampled per epoch.
pub fn run_finetune(
    config: &TrainConfig,
    triples: &[TrainingTriple],
    init: EncoderParams,
    hooks: &mut dyn TrainingHooks,
) -> Result<TrainOutcome> {
    let missing: Vec<usize> = triples
        .iter()
        .enumerate()
        .filter(|(_, t)| t.hard_negatives.is_empty())
        .map(|(i, _)| i)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Invalid(format!(
            "triples without hard negatives (mine them first): {:?}",
            missing
        )));
    }
    run_loop(config, triples.len(), init, hooks, |params, batch, rng, step| {
        let items: Vec<(&TrainingPair, &str)> = batch
            .iter()
            .map(|&i| {
                let t = &triples[i];
                let pick = rng.random_range(0..t.hard_negatives.len());
                (&t.pair, t.hard_negatives[pick].as_str())
            })
            .collect();
        warn_duplicate_positives(step, items.iter().map(|(p, _)| p.positive.clone()));
        let (loss, grads) = finetune_batch(params, &items, &config.loss, true)?;
        Ok((loss, grads.expect("gradient requested")))
    })
}
