//! Tiny pre-norm causal transformer encoder with EOS pooling.
//!
//! Texts are byte-tokenized, prefixed with BOS and terminated with EOS; the
//! final-layer hidden state at the EOS position (after the final layer norm)
//! is the embedding. Everything runs in `f64` so the analytic backward pass in
//! [`model`] can be checked against finite differences.

mod checkpoint;
mod model;
mod tokenizer;

use ndarray::{Array1, Array2};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use model::{backward_batch, forward_batch, BatchCache};
pub use tokenizer::{tokenize, TokenSequence, BOS, EOS, PAD, VOCAB_SIZE};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 128,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::Invalid(format!(
                "vocab_size must be {VOCAB_SIZE}, got {}",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Invalid(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 4 {
            return Err(Error::Invalid(format!(
                "max_seq_len must be >= 4, got {}",
                self.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm_scale: Array1<f64>,
    pub attn_norm_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub mlp_norm_scale: Array1<f64>,
    pub mlp_norm_bias: Array1<f64>,
    /// `d_model × 4·d_model`
    pub w_in: Array2<f64>,
    /// `4·d_model × d_model`
    pub w_out: Array2<f64>,
}

/// Every trainable tensor of the encoder. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_norm_scale: Array1<f64>,
    pub final_norm_bias: Array1<f64>,
}

pub type Gradients = Weights;

impl Weights {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.d_model;
        let h = config.mlp_dim();
        let layer = LayerWeights {
            attn_norm_scale: Array1::zeros(d),
            attn_norm_bias: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            mlp_norm_scale: Array1::zeros(d),
            mlp_norm_bias: Array1::zeros(d),
            w_in: Array2::zeros((d, h)),
            w_out: Array2::zeros((h, d)),
        };
        Weights {
            token_embedding: Array2::zeros((config.vocab_size, d)),
            position_embedding: Array2::zeros((config.max_seq_len, d)),
            layers: vec![layer; config.n_layers],
            final_norm_scale: Array1::zeros(d),
            final_norm_bias: Array1::zeros(d),
        }
    }

    /// Tensors in declaration (and checkpoint) order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        fn s1(a: &Array1<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        fn s2(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        let mut out = vec![
            ("token_embedding".to_string(), s2(&self.token_embedding)),
            ("position_embedding".to_string(), s2(&self.position_embedding)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm_scale"), s1(&l.attn_norm_scale)));
            out.push((format!("layers.{i}.attn_norm_bias"), s1(&l.attn_norm_bias)));
            out.push((format!("layers.{i}.wq"), s2(&l.wq)));
            out.push((format!("layers.{i}.wk"), s2(&l.wk)));
            out.push((format!("layers.{i}.wv"), s2(&l.wv)));
            out.push((format!("layers.{i}.wo"), s2(&l.wo)));
            out.push((format!("layers.{i}.mlp_norm_scale"), s1(&l.mlp_norm_scale)));
            out.push((format!("layers.{i}.mlp_norm_bias"), s1(&l.mlp_norm_bias)));
            out.push((format!("layers.{i}.w_in"), s2(&l.w_in)));
            out.push((format!("layers.{i}.w_out"), s2(&l.w_out)));
        }
        out.push(("final_norm_scale".to_string(), s1(&self.final_norm_scale)));
        out.push(("final_norm_bias".to_string(), s1(&self.final_norm_bias)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        fn s1(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        fn s2(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out = vec![
            ("token_embedding".to_string(), s2(&mut self.token_embedding)),
            ("position_embedding".to_string(), s2(&mut self.position_embedding)),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm_scale"), s1(&mut l.attn_norm_scale)));
            out.push((format!("layers.{i}.attn_norm_bias"), s1(&mut l.attn_norm_bias)));
            out.push((format!("layers.{i}.wq"), s2(&mut l.wq)));
            out.push((format!("layers.{i}.wk"), s2(&mut l.wk)));
            out.push((format!("layers.{i}.wv"), s2(&mut l.wv)));
            out.push((format!("layers.{i}.wo"), s2(&mut l.wo)));
            out.push((format!("layers.{i}.mlp_norm_scale"), s1(&mut l.mlp_norm_scale)));
            out.push((format!("layers.{i}.mlp_norm_bias"), s1(&mut l.mlp_norm_bias)));
            out.push((format!("layers.{i}.w_in"), s2(&mut l.w_in)));
            out.push((format!("layers.{i}.w_out"), s2(&mut l.w_out)));
        }
        out.push(("final_norm_scale".to_string(), s1(&mut self.final_norm_scale)));
        out.push(("final_norm_bias".to_string(), s1(&mut self.final_norm_bias)));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor in declaration order.
    pub fn add_assign(&mut self, other: &Weights) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub weights: Weights,
}

/// Uniform(±1/√d_model) for every matrix, ones for norm scales, zeros for
/// norm biases. Deterministic in `config.seed`.
pub fn init_params(config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let mut weights = Weights::zeros(config);
    let bound = 1.0 / (config.d_model as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for (name, tensor) in weights.tensors_mut() {
        if name.ends_with("_scale") {
            tensor.fill(1.0);
        } else if name.ends_with("_bias") {
            tensor.fill(0.0);
        } else {
            for x in tensor.iter_mut() {
                *x = dist.sample(&mut rng);
            }
        }
    }
    Ok(EncoderParams {
        config: *config,
        weights,
    })
}

impl EncoderParams {
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        tokenize(text, self.config.max_seq_len)
    }

    /// Embeds already-formatted texts, in chunks of `chunk` items.
    pub fn embed_texts(&self, texts: &[String], chunk: usize) -> Array2<f64> {
        let d = self.config.d_model;
        let mut out = Array2::zeros((texts.len(), d));
        for (c, block) in texts.chunks(chunk.max(1)).enumerate() {
            let seqs: Vec<TokenSequence> = block.iter().map(|t| self.tokenize(t)).collect();
            let (emb, _) = forward_batch(self, &seqs).expect("non-empty chunk");
            let start = c * chunk.max(1);
            out.slice_mut(ndarray::s![start..start + block.len(), ..]).assign(&emb);
        }
        out
    }
}

/// Embedding of `text` with an instruction template applied.
pub fn encode(params: &EncoderParams, instruction: &str, text: &str) -> Array1<f64> {
    let formatted = crate::pairgen::apply_template(instruction, text);
    let seq = params.tokenize(&formatted);
    let (emb, _) = forward_batch(params, std::slice::from_ref(&seq)).expect("single item batch");
    emb.row(0).to_owned()
}
