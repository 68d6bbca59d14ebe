//! Perplexity of a GPT-2 style decoder over pre-tokenized sequences.
//!
//! The forward pass is the standard pre-norm stack: token + position
//! embeddings, then per block `x += proj(attn(LN₁ x))` and
//! `x += mlp(LN₂ x)`, a final layer norm, and logits against the tied token
//! embedding. Attention is causal and GELU uses the exact erf form. Every row
//! of every intermediate depends only on positions at or before it.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelWeights;
use crate::delta::{apply_to_base, compose, DeltaSet};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDataset {
    pub max_seq_len: usize,
    pub vocab_bound: usize,
    pub sequences: Vec<Vec<u32>>,
}

impl TokenDataset {
    pub fn validate(&self) -> Result<()> {
        if self.max_seq_len == 0 {
            return Err(Error::Input("max_seq_len must be positive".into()));
        }
        if self.sequences.is_empty() {
            return Err(Error::Input("dataset holds no sequences".into()));
        }
        for (i, seq) in self.sequences.iter().enumerate() {
            if seq.len() < 2 {
                return Err(Error::Input(format!(
                    "sequence {i} has {} tokens; at least 2 are needed",
                    seq.len()
                )));
            }
            if seq.len() > self.max_seq_len {
                return Err(Error::Input(format!(
                    "sequence {i} has {} tokens, above max_seq_len {}",
                    seq.len(),
                    self.max_seq_len
                )));
            }
            if let Some((pos, tok)) = seq.iter().enumerate().find(|(_, &t)| t as usize >= self.vocab_bound) {
                return Err(Error::Input(format!(
                    "sequence {i} position {pos}: token {tok} is outside [0, {})",
                    self.vocab_bound
                )));
            }
        }
        Ok(())
    }

    /// Checks the dataset fits a model's vocabulary and context.
    pub fn validate_for(&self, weights: &ModelWeights) -> Result<()> {
        self.validate()?;
        let dims = weights.dims();
        for (i, seq) in self.sequences.iter().enumerate() {
            if seq.len() > dims.n_positions {
                return Err(Error::Input(format!(
                    "sequence {i} has {} tokens but the model has {} positions",
                    seq.len(),
                    dims.n_positions
                )));
            }
            if let Some((pos, tok)) = seq.iter().enumerate().find(|(_, &t)| t as usize >= dims.vocab_size) {
                return Err(Error::Input(format!(
                    "sequence {i} position {pos}: token {tok} exceeds the model vocabulary of {}",
                    dims.vocab_size
                )));
            }
        }
        Ok(())
    }
}

pub fn load_dataset(path: &Path) -> Result<TokenDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let data: TokenDataset = serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: byte_offset(&text, e.line(), e.column()),
        message: format!("dataset {}: {e}", path.display()),
    })?;
    data.validate()?;
    Ok(data)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    line_start + column.saturating_sub(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerplexityResult {
    pub mean_nll: f64,
    pub perplexity: f64,
    pub token_count: usize,
}

impl PerplexityResult {
    pub fn from_mean_nll(mean_nll: f64, token_count: usize) -> Self {
        Self {
            mean_nll,
            perplexity: mean_nll.exp(),
            token_count,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Weighting {
    /// Mean over every predicted position across all sequences.
    #[default]
    Token,
    /// Mean of per-sequence means.
    Sequence,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Matrix {
    let d = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        out.extend(
            row.iter()
                .zip(gain.as_slice())
                .zip(bias.as_slice())
                .map(|((v, g), b)| (v - mean) * inv * g + b),
        );
    }
    Matrix::new(x.rows(), d, out).expect("same shape")
}

fn affine(x: &Matrix, w: &Matrix, bias: &Matrix) -> Result<Matrix> {
    let y = matmul(x, w)?;
    let cols = y.cols();
    let mut data = y.into_vec();
    for row in data.chunks_exact_mut(cols) {
        for (v, b) in row.iter_mut().zip(bias.as_slice()) {
            *v += b;
        }
    }
    Matrix::new(x.rows(), cols, data)
}

fn add_in_place(x: &mut Matrix, y: &Matrix) {
    let (rows, cols) = x.shape();
    let sum: Vec<f64> = x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a + b).collect();
    *x = Matrix::new(rows, cols, sum).expect("same shape");
}

fn causal_attention(qkv: &Matrix, d: usize, heads: usize) -> Matrix {
    let t_len = qkv.rows();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Matrix::zeros(t_len, d);
    let mut scores = vec![0.0; t_len];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        for t in 0..t_len {
            let q = &qkv.row(t)[qo..qo + hd];
            let mut max = f64::NEG_INFINITY;
            for (s, score) in scores.iter_mut().enumerate().take(t + 1) {
                let k = &qkv.row(s)[ko..ko + hd];
                *score = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*score);
            }
            let mut denom = 0.0;
            for score in scores.iter_mut().take(t + 1) {
                *score = (*score - max).exp();
                denom += *score;
            }
            for j in 0..hd {
                let mut acc = 0.0;
                for (s, &p) in scores.iter().enumerate().take(t + 1) {
                    acc += p * qkv.get(s, vo + j);
                }
                out.set(t, qo + j, acc / denom);
            }
        }
    }
    out
}

fn ensure_finite(m: &Matrix, what: impl FnOnce() -> String) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activations in {}", what())))
    }
}

/// Logits `(len, vocab)` for one token sequence.
pub fn forward(weights: &ModelWeights, tokens: &[u32]) -> Result<Matrix> {
    let dims = *weights.dims();
    let (d, heads) = (dims.d_model, dims.n_head);
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > dims.n_positions {
        return Err(Error::Input(format!(
            "{} tokens exceed the model's {} positions",
            tokens.len(),
            dims.n_positions
        )));
    }
    if let Some((pos, tok)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= dims.vocab_size) {
        return Err(Error::Input(format!(
            "token {tok} at position {pos} is outside the vocabulary of {}",
            dims.vocab_size
        )));
    }

    let wte = weights.expect("transformer.wte.weight");
    let wpe = weights.expect("transformer.wpe.weight");
    let mut data = Vec::with_capacity(tokens.len() * d);
    for (pos, &tok) in tokens.iter().enumerate() {
        data.extend(wte.row(tok as usize).iter().zip(wpe.row(pos)).map(|(a, b)| a + b));
    }
    let mut x = Matrix::new(tokens.len(), d, data)?;

    let eps = dims.layer_norm_epsilon;
    for block in 0..dims.n_layer {
        let p = |s: &str| weights.expect(&format!("transformer.h.{block}.{s}"));
        let h = layer_norm(&x, p("ln_1.weight"), p("ln_1.bias"), eps);
        let qkv = affine(&h, p("attn.c_attn.weight"), p("attn.c_attn.bias"))?;
        let attn = causal_attention(&qkv, d, heads);
        let proj = affine(&attn, p("attn.c_proj.weight"), p("attn.c_proj.bias"))?;
        add_in_place(&mut x, &proj);

        let h = layer_norm(&x, p("ln_2.weight"), p("ln_2.bias"), eps);
        let up = affine(&h, p("mlp.c_fc.weight"), p("mlp.c_fc.bias"))?.map(gelu);
        let down = affine(&up, p("mlp.c_proj.weight"), p("mlp.c_proj.bias"))?;
        add_in_place(&mut x, &down);
        ensure_finite(&x, || format!("block {block}"))?;
    }

    let h = layer_norm(
        &x,
        weights.expect("transformer.ln_f.weight"),
        weights.expect("transformer.ln_f.bias"),
        eps,
    );
    // Tied head: logits[t][v] = h[t] · wte[v].
    let mut logits = Vec::with_capacity(tokens.len() * dims.vocab_size);
    for t in 0..h.rows() {
        let ht = h.row(t);
        logits.extend((0..dims.vocab_size).map(|v| ht.iter().zip(wte.row(v)).map(|(a, b)| a * b).sum::<f64>()));
    }
    let logits = Matrix::new(tokens.len(), dims.vocab_size, logits)?;
    ensure_finite(&logits, || "output logits".to_string())?;
    Ok(logits)
}

/// `log softmax(row)[target]` with max subtraction.
pub fn log_prob(row: &[f64], target: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

/// Summed NLL of next-token predictions and the number of predictions.
fn sequence_nll(weights: &ModelWeights, seq: &[u32]) -> Result<(f64, usize)> {
    let logits = forward(weights, seq)?;
    let mut total = 0.0;
    for t in 0..seq.len() - 1 {
        total -= log_prob(logits.row(t), seq[t + 1] as usize);
    }
    Ok((total, seq.len() - 1))
}

pub fn mean_nll(weights: &ModelWeights, data: &TokenDataset) -> Result<PerplexityResult> {
    mean_nll_weighted(weights, data, Weighting::Token)
}

/// Per-sequence sums are computed independently and reduced in sequence
/// order, so the result does not depend on thread scheduling.
pub fn mean_nll_weighted(weights: &ModelWeights, data: &TokenDataset, weighting: Weighting) -> Result<PerplexityResult> {
    data.validate_for(weights)?;
    let per_seq: Vec<(f64, usize)> = data
        .sequences
        .par_iter()
        .map(|seq| sequence_nll(weights, seq))
        .collect::<Result<_>>()?;
    let token_count: usize = per_seq.iter().map(|p| p.1).sum();
    let mean = match weighting {
        Weighting::Token => per_seq.iter().map(|p| p.0).sum::<f64>() / token_count as f64,
        Weighting::Sequence => {
            per_seq.iter().map(|(s, n)| s / *n as f64).sum::<f64>() / per_seq.len() as f64
        }
    };
    if !mean.is_finite() {
        return Err(Error::Numeric(format!("mean NLL evaluated to {mean}")));
    }
    Ok(PerplexityResult::from_mean_nll(mean, token_count))
}

/// `mean_nll(apply_to_base(base, compose(sets)), data)`.
pub fn eval_composed(base: &ModelWeights, sets: &[(&DeltaSet, f64)], data: &TokenDataset) -> Result<PerplexityResult> {
    if sets.is_empty() {
        return Err(Error::Composition("no delta sets given; evaluate the base model directly instead".into()));
    }
    let composed = compose(sets)?;
    let model = apply_to_base(base, &composed)?;
    mean_nll(&model, data)
}
