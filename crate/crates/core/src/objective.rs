//! Similarity scoring and the two InfoNCE objectives.
//!
//! Pre-training scores `n` queries against their `n` positives (diagonal is
//! the target). Fine-tuning scores `n` queries against `2n` candidates: the
//! `n` positives followed by the `n` hard negatives, all shared across the
//! batch. Both losses are averaged over queries and computed with per-row max
//! subtraction.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Similarity::Dot),
            "cosine" | "cos" => Ok(Similarity::Cosine),
            other => Err(Error::Invalid(format!("unknown similarity `{other}` (dot|cosine)"))),
        }
    }
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Similarity::Dot => "dot",
            Similarity::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub similarity: Similarity,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 1.0,
            similarity: Similarity::Dot,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Invalid(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

pub fn sim(a: ArrayView1<f64>, b: ArrayView1<f64>, similarity: Similarity) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("embedding dims {} vs {}", a.len(), b.len())));
    }
    let dot = a.dot(&b);
    match similarity {
        Similarity::Dot => Ok(dot),
        Similarity::Cosine => {
            let na = a.dot(&a).sqrt();
            let nb = b.dot(&b).sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Invalid("cosine similarity of a zero vector".into()));
            }
            Ok(dot / (na * nb))
        }
    }
}

fn row_norms(m: &Array2<f64>) -> Result<Array1<f64>> {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Invalid(format!("row {i} has zero norm under cosine similarity")));
    }
    Ok(norms)
}

fn normalize_rows(m: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    m / &norms.view().insert_axis(Axis(1))
}

/// `S[i][j] = sim(queries[i], passages[j])`.
pub fn score_matrix(queries: &Array2<f64>, passages: &Array2<f64>, similarity: Similarity) -> Result<Array2<f64>> {
    if queries.ncols() != passages.ncols() {
        return Err(Error::Shape(format!(
            "embedding dims {} vs {}",
            queries.ncols(),
            passages.ncols()
        )));
    }
    match similarity {
        Similarity::Dot => Ok(queries.dot(&passages.t())),
        Similarity::Cosine => {
            let qn = normalize_rows(queries, &row_norms(queries)?);
            let pn = normalize_rows(passages, &row_norms(passages)?);
            Ok(qn.dot(&pn.t()))
        }
    }
}

/// Mean softmax cross-entropy where row `i` targets column `i`.
fn info_nce(scores: &Array2<f64>, temperature: f64) -> Result<(f64, Array2<f64>)> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Invalid(format!("temperature must be > 0, got {temperature}")));
    }
    if let Some(bad) = scores.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("score {bad}")));
    }
    let n = scores.nrows();
    if n == 0 {
        return Err(Error::Shape("empty score matrix".into()));
    }
    let mut grad = Array2::zeros(scores.raw_dim());
    let mut loss = 0.0;
    for (i, row) in scores.outer_iter().enumerate() {
        let logits = row.mapv(|s| s / temperature);
        let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let exps = logits.mapv(|x| (x - max).exp());
        let sum = exps.sum();
        loss += sum.ln() + max - logits[i];
        let mut g = grad.row_mut(i);
        for j in 0..exps.len() {
            let p = exps[j] / sum;
            g[j] = (p - if i == j { 1.0 } else { 0.0 }) / (temperature * n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

/// In-batch-negative InfoNCE over a square score matrix.
pub fn loss_cpt(scores: &Array2<f64>, temperature: f64) -> Result<(f64, Array2<f64>)> {
    if scores.nrows() != scores.ncols() {
        return Err(Error::Shape(format!(
            "pre-training scores must be square, got {:?}",
            scores.dim()
        )));
    }
    info_nce(scores, temperature)
}

/// InfoNCE over `[positives | hard negatives]`, an `n × 2n` score matrix.
pub fn loss_ft(scores: &Array2<f64>, temperature: f64) -> Result<(f64, Array2<f64>)> {
    if scores.ncols() != 2 * scores.nrows() {
        return Err(Error::Shape(format!(
            "fine-tuning scores must be n x 2n, got {:?}",
            scores.dim()
        )));
    }
    info_nce(scores, temperature)
}

/// Chain rule from `∂L/∂S` to the query and passage embeddings.
pub fn grad_wrt_embeddings(
    queries: &Array2<f64>,
    passages: &Array2<f64>,
    grad_scores: &Array2<f64>,
    similarity: Similarity,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if grad_scores.dim() != (queries.nrows(), passages.nrows()) || queries.ncols() != passages.ncols() {
        return Err(Error::Shape(format!(
            "queries {:?}, passages {:?}, grad {:?}",
            queries.dim(),
            passages.dim(),
            grad_scores.dim()
        )));
    }
    match similarity {
        Similarity::Dot => Ok((grad_scores.dot(passages), grad_scores.t().dot(queries))),
        Similarity::Cosine => {
            let qnorm = row_norms(queries)?;
            let pnorm = row_norms(passages)?;
            let qh = normalize_rows(queries, &qnorm);
            let ph = normalize_rows(passages, &pnorm);
            let s = qh.dot(&ph.t());
            let gs = grad_scores * &s;
            // dq_i = (Σ_j G_ij p̂_j − (Σ_j G_ij S_ij) q̂_i) / ‖q_i‖
            let gq_sum = gs.sum_axis(Axis(1)).insert_axis(Axis(1));
            let gq = (grad_scores.dot(&ph) - &qh * &gq_sum) / qnorm.view().insert_axis(Axis(1));
            let gp_sum = gs.sum_axis(Axis(0)).insert_axis(Axis(1));
            let gp = (grad_scores.t().dot(&qh) - &ph * &gp_sum) / pnorm.view().insert_axis(Axis(1));
            Ok((gq, gp))
        }
    }
}
