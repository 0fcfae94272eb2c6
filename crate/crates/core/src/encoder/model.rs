//! Forward and analytic backward passes.
//!
//! Shapes per item: `T` padded positions, `d` model width, `h` heads of width
//! `d / h`. Weight matrices multiply row vectors from the right (`x · W`).

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;

use super::{EncoderParams, Gradients, LayerWeights, TokenSequence, Weights, LN_EPS, PAD};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, scale: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, NormCache) {
    let (rows, d) = x.dim();
    let mut xhat = Array2::zeros((rows, d));
    let mut rstd = Array1::zeros(rows);
    for (r, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for (o, v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
            *o = (v - mean) * rs;
        }
    }
    let y = &xhat * scale + bias;
    (y, NormCache { xhat, rstd })
}

/// Returns dx; accumulates into `dscale`/`dbias`.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    scale: &Array1<f64>,
    dscale: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    *dscale += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let dxhat = dy * scale;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let g = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let rs = cache.rstd[r];
        for ((o, gv), xv) in dx.row_mut(r).iter_mut().zip(g.iter()).zip(xh.iter()) {
            *o = rs * (gv - mean_g - xv * mean_gx);
        }
    }
    dx
}

struct LayerCache {
    ln1: NormCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention probabilities per head, `T × T`.
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: NormCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    z: Array2<f64>,
}

struct ItemCache {
    ids: Vec<u32>,
    len: usize,
    layers: Vec<LayerCache>,
    final_xhat: Array1<f64>,
    final_rstd: f64,
}

/// Activations kept by [`forward_batch`] for [`backward_batch`].
pub struct BatchCache {
    items: Vec<ItemCache>,
    padded_len: usize,
    d_model: usize,
}

impl BatchCache {
    pub fn batch_size(&self) -> usize {
        self.items.len()
    }

    pub fn padded_len(&self) -> usize {
        self.padded_len
    }
}

struct AttentionOut {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
}

fn attention_forward(h1: &Array2<f64>, w: &LayerWeights, n_heads: usize, len: usize) -> AttentionOut {
    let q = h1.dot(&w.wq);
    let k = h1.dot(&w.wk);
    let v = h1.dot(&w.wv);
    let (t, d) = q.dim();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut attn = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut p = qh.dot(&kh.t()) * scale;
        for i in 0..t {
            // Causal: keys j <= i; padding: keys j < len.
            let visible = (i + 1).min(len);
            let mut row = p.row_mut(i);
            let max = row.slice(s![..visible]).fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            for j in 0..t {
                if j < visible {
                    let e = (row[j] - max).exp();
                    row[j] = e;
                    sum += e;
                } else {
                    row[j] = 0.0;
                }
            }
            row /= sum;
        }
        attn.slice_mut(cols).assign(&p.dot(&vh));
        probs.push(p);
    }
    AttentionOut { q, k, v, probs, attn }
}

fn forward_item(params: &EncoderParams, ids: &[u32], len: usize) -> (Array1<f64>, ItemCache) {
    let cfg = &params.config;
    let w = &params.weights;
    let t = ids.len();
    let d = cfg.d_model;
    let mut x = Array2::zeros((t, d));
    for (pos, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(pos);
        row += &w.token_embedding.row(id as usize);
        row += &w.position_embedding.row(pos);
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lw in &w.layers {
        let (h1, ln1) = layer_norm(&x, &lw.attn_norm_scale, &lw.attn_norm_bias);
        let AttentionOut { q, k, v, probs, attn } = attention_forward(&h1, lw, cfg.n_heads, len);
        x += &attn.dot(&lw.wo);
        let (h2, ln2) = layer_norm(&x, &lw.mlp_norm_scale, &lw.mlp_norm_bias);
        let u = h2.dot(&lw.w_in);
        let z = u.mapv(gelu);
        x += &z.dot(&lw.w_out);
        layers.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            attn,
            ln2,
            h2,
            u,
            z,
        });
    }
    let eos = len - 1;
    let last = x.slice(s![eos..eos + 1, ..]).to_owned();
    let (y, fin) = layer_norm(&last, &w.final_norm_scale, &w.final_norm_bias);
    let cache = ItemCache {
        ids: ids.to_vec(),
        len,
        layers,
        final_xhat: fin.xhat.row(0).to_owned(),
        final_rstd: fin.rstd[0],
    };
    (y.row(0).to_owned(), cache)
}

/// Encodes a batch, right-padding every sequence with PAD to the longest one.
/// Row `i` of the result is the pooled EOS embedding of item `i`.
pub fn forward_batch(params: &EncoderParams, batch: &[TokenSequence]) -> Result<(Array2<f64>, BatchCache)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let padded_len = batch.iter().map(TokenSequence::len).max().unwrap_or(0);
    if padded_len > params.config.max_seq_len {
        return Err(Error::Shape(format!(
            "sequence length {padded_len} exceeds max_seq_len {}",
            params.config.max_seq_len
        )));
    }
    let results: Vec<(Array1<f64>, ItemCache)> = batch
        .par_iter()
        .map(|seq| {
            let mut ids = seq.ids().to_vec();
            ids.resize(padded_len, PAD);
            forward_item(params, &ids, seq.len())
        })
        .collect();
    let d = params.config.d_model;
    let mut emb = Array2::zeros((batch.len(), d));
    let mut items = Vec::with_capacity(batch.len());
    for (i, (e, c)) in results.into_iter().enumerate() {
        emb.row_mut(i).assign(&e);
        items.push(c);
    }
    Ok((
        emb,
        BatchCache {
            items,
            padded_len,
            d_model: d,
        },
    ))
}

fn backward_item(params: &EncoderParams, cache: &ItemCache, grad: ArrayView1<f64>) -> Gradients {
    let cfg = &params.config;
    let w = &params.weights;
    let mut g = Weights::zeros(cfg);
    let t = cache.ids.len();
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    // Final layer norm, EOS row only.
    let eos = cache.len - 1;
    let mut dx = Array2::<f64>::zeros((t, d));
    {
        g.final_norm_scale += &(&grad * &cache.final_xhat);
        g.final_norm_bias += &grad;
        let dxhat = &grad * &w.final_norm_scale;
        let mean_g = dxhat.sum() / d as f64;
        let mean_gx = dxhat.dot(&cache.final_xhat) / d as f64;
        let mut row = dx.row_mut(eos);
        for k in 0..d {
            row[k] = cache.final_rstd * (dxhat[k] - mean_g - cache.final_xhat[k] * mean_gx);
        }
    }

    for (li, (lw, lc)) in w.layers.iter().zip(&cache.layers).enumerate().rev() {
        let lg = &mut g.layers[li];

        // MLP residual branch.
        lg.w_out += &lc.z.t().dot(&dx);
        let dz = dx.dot(&lw.w_out.t());
        let du = &dz * &lc.u.mapv(gelu_grad);
        lg.w_in += &lc.h2.t().dot(&du);
        let dh2 = du.dot(&lw.w_in.t());
        dx += &layer_norm_backward(
            &dh2,
            &lc.ln2,
            &lw.mlp_norm_scale,
            &mut lg.mlp_norm_scale,
            &mut lg.mlp_norm_bias,
        );

        // Attention residual branch.
        lg.wo += &lc.attn.t().dot(&dx);
        let dattn = dx.dot(&lw.wo.t());
        let mut dq = Array2::<f64>::zeros((t, d));
        let mut dk = Array2::<f64>::zeros((t, d));
        let mut dv = Array2::<f64>::zeros((t, d));
        for (h, p) in lc.probs.iter().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let dout = dattn.slice(cols);
            let vh = lc.v.slice(cols);
            let dp = dout.dot(&vh.t());
            dv.slice_mut(cols).assign(&p.t().dot(&dout));
            // Softmax backward, row-wise.
            let mut ds = p * &dp;
            for i in 0..t {
                let dot: f64 = ds.row(i).sum();
                let mut row = ds.row_mut(i);
                row.zip_mut_with(&p.row(i), |x, &pv| *x -= pv * dot);
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
        }
        lg.wq += &lc.h1.t().dot(&dq);
        lg.wk += &lc.h1.t().dot(&dk);
        lg.wv += &lc.h1.t().dot(&dv);
        let dh1 = dq.dot(&lw.wq.t()) + dk.dot(&lw.wk.t()) + dv.dot(&lw.wv.t());
        dx += &layer_norm_backward(
            &dh1,
            &lc.ln1,
            &lw.attn_norm_scale,
            &mut lg.attn_norm_scale,
            &mut lg.attn_norm_bias,
        );
    }

    for pos in 0..cache.len {
        let row = dx.row(pos);
        let mut te = g.token_embedding.row_mut(cache.ids[pos] as usize);
        te += &row;
        let mut pe = g.position_embedding.row_mut(pos);
        pe += &row;
    }
    g
}

/// Gradient of `Σ_i grad[i] · embedding_i` with respect to every parameter.
///
/// Per-item gradients are computed independently and summed in item order,
/// so the result does not depend on the worker count.
pub fn backward_batch(params: &EncoderParams, cache: &BatchCache, grad: &Array2<f64>) -> Result<Gradients> {
    if grad.dim() != (cache.items.len(), cache.d_model) || cache.d_model != params.config.d_model {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match batch ({}, {})",
            grad.dim(),
            cache.items.len(),
            cache.d_model
        )));
    }
    let per_item: Vec<Gradients> = cache
        .items
        .par_iter()
        .enumerate()
        .map(|(i, item)| backward_item(params, item, grad.row(i)))
        .collect();
    let mut total = Weights::zeros(&params.config);
    for g in &per_item {
        total.add_assign(g);
    }
    Ok(total)
}
