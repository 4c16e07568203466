//! Caching forward pass.

use crate::error::{Error, Result};
use crate::model::{LayerNorm, Model, ModelConfig};
use crate::scalar::{dot, Mat, Scalar};
use crate::tokenizer::TokenId;

/// Layernorm operating point. `std` already includes `ln_epsilon`.
#[derive(Debug, Clone)]
pub struct NormRecord<T> {
    pub input: Mat<T>,
    pub mean: Vec<T>,
    pub std: Vec<T>,
    /// `(x - mean) / std`
    pub normed: Mat<T>,
    pub output: Mat<T>,
}

#[derive(Debug, Clone)]
pub struct LayerRecord<T> {
    /// Residual stream entering the block.
    pub input: Mat<T>,
    pub ln1: NormRecord<T>,
    pub q: Mat<T>,
    pub k: Mat<T>,
    pub v: Mat<T>,
    /// Scaled pre-softmax scores per head, `seq × seq`, zero above the diagonal.
    pub scores: Vec<Mat<T>>,
    /// Post-softmax attention per head, `seq × seq`; `A[i][j] = 0` for `j > i`.
    pub attn: Vec<Mat<T>>,
    /// Per-head outputs `z_i^h`, concatenated over heads (`seq × d_model`).
    pub z: Mat<T>,
    pub attn_out: Mat<T>,
    /// Residual after the attention branch.
    pub mid: Mat<T>,
    pub ln2: NormRecord<T>,
    pub ff_pre: Mat<T>,
    pub ff_act: Mat<T>,
    pub mlp_out: Mat<T>,
    pub output: Mat<T>,
}

/// Everything a backward or relevance pass needs from one forward.
#[derive(Debug, Clone)]
pub struct ActivationCache<T> {
    pub config: ModelConfig,
    pub tokens: Vec<TokenId>,
    /// Token plus position embedding per position.
    pub embeddings: Mat<T>,
    pub layers: Vec<LayerRecord<T>>,
    pub final_norm: Option<NormRecord<T>>,
    /// Input to the unembedding (final layernorm output, or the embeddings
    /// for a 0-layer model).
    pub final_hidden: Mat<T>,
    /// Logits at the last position.
    pub logits: Vec<T>,
}

impl<T: Scalar> ActivationCache<T> {
    pub fn seq_len(&self) -> usize {
        self.embeddings.rows
    }

    /// Residual stream entering block `layer`; `layer == n_layers` is the
    /// stream after the last block.
    pub fn residual(&self, layer: usize) -> &Mat<T> {
        if layer < self.layers.len() {
            &self.layers[layer].input
        } else if let Some(last) = self.layers.last() {
            &last.output
        } else {
            &self.embeddings
        }
    }

    pub(crate) fn check_model(&self, model: &Model<T>) -> Result<()> {
        if self.config != model.config {
            return Err(Error::StaleCache("config differs from model".into()));
        }
        if self.layers.len() != model.config.n_layers
            || self.final_hidden.rows != self.tokens.len()
            || self.logits.len() != model.config.vocab_size
        {
            return Err(Error::StaleCache("cache is incomplete".into()));
        }
        Ok(())
    }
}

pub fn check_tokens(config: &ModelConfig, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() || tokens.len() > config.max_seq_len {
        return Err(Error::SequenceLength {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: id as usize,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

/// Token plus learned position embeddings.
pub fn embed<T: Scalar>(model: &Model<T>, tokens: &[TokenId]) -> Mat<T> {
    let d = model.config.d_model;
    let mut x = Mat::zeros(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        let e = model.token_embedding.row(t as usize);
        let p = model.position_embedding.row(i);
        for ((o, &a), &b) in x.row_mut(i).iter_mut().zip(e).zip(p) {
            *o = a + b;
        }
    }
    x
}

/// Runs the model on `tokens` and returns the last-position logits with the
/// full activation cache.
pub fn forward<T: Scalar>(
    model: &Model<T>,
    tokens: &[TokenId],
) -> Result<(Vec<T>, ActivationCache<T>)> {
    check_tokens(&model.config, tokens)?;
    let cache = forward_embeddings(model, tokens, embed(model, tokens));
    Ok((cache.logits.clone(), cache))
}

/// Forward from explicit input embeddings. `tokens` is only recorded.
pub fn forward_embeddings<T: Scalar>(
    model: &Model<T>,
    tokens: &[TokenId],
    embeddings: Mat<T>,
) -> ActivationCache<T> {
    let cfg = &model.config;
    let mut x = embeddings.clone();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for block in &model.blocks {
        let input = x;
        let ln1 = layer_norm(&input, &block.ln1, cfg.ln_epsilon);
        let q = block.q.apply(&ln1.output);
        let k = block.k.apply(&ln1.output);
        let v = block.v.apply(&ln1.output);
        let (scores, attn, z) = attention(cfg, &q, &k, &v);
        let attn_out = block.o.apply(&z);
        let mut mid = input.clone();
        mid.add_assign(&attn_out);
        let ln2 = layer_norm(&mid, &block.ln2, cfg.ln_epsilon);
        let ff_pre = block.ff1.apply(&ln2.output);
        let ff_act = Mat::from_vec(
            ff_pre.rows,
            ff_pre.cols,
            ff_pre.data.iter().map(|&u| cfg.activation.apply(u)).collect(),
        );
        let mlp_out = block.ff2.apply(&ff_act);
        let mut output = mid.clone();
        output.add_assign(&mlp_out);
        x = output.clone();
        layers.push(LayerRecord {
            input,
            ln1,
            q,
            k,
            v,
            scores,
            attn,
            z,
            attn_out,
            mid,
            ln2,
            ff_pre,
            ff_act,
            mlp_out,
            output,
        });
    }
    let (final_norm, final_hidden) = match &model.final_norm {
        Some(ln) => {
            let rec = layer_norm(&x, ln, cfg.ln_epsilon);
            let h = rec.output.clone();
            (Some(rec), h)
        }
        None => (None, x),
    };
    let last = final_hidden.row(final_hidden.rows - 1);
    let logits = unembed_row(model, last);
    ActivationCache {
        config: cfg.clone(),
        tokens: tokens.to_vec(),
        embeddings,
        layers,
        final_norm,
        final_hidden,
        logits,
    }
}

pub(crate) fn unembed_row<T: Scalar>(model: &Model<T>, h: &[T]) -> Vec<T> {
    let v = model.config.vocab_size;
    let mut out = vec![T::zero(); v];
    for (k, &hk) in h.iter().enumerate() {
        for (o, &u) in out.iter_mut().zip(model.unembedding.row(k)) {
            *o += hk * u;
        }
    }
    out
}

/// Logits at every position (`seq × vocab`).
pub fn all_logits<T: Scalar>(model: &Model<T>, cache: &ActivationCache<T>) -> Mat<T> {
    cache.final_hidden.matmul(&model.unembedding)
}

/// Last-position logits read out from the residual stream entering block
/// `layer` through the final layernorm and unembedding (early exit).
pub fn early_exit_logits<T: Scalar>(
    model: &Model<T>,
    cache: &ActivationCache<T>,
    layer: usize,
) -> Result<Vec<T>> {
    if layer > model.config.n_layers {
        return Err(Error::IndexOutOfRange(format!(
            "layer {layer} > n_layers {}",
            model.config.n_layers
        )));
    }
    let resid = cache.residual(layer);
    let last = Mat::from_vec(1, resid.cols, resid.row(resid.rows - 1).to_vec());
    let h = match &model.final_norm {
        Some(ln) => layer_norm(&last, ln, model.config.ln_epsilon).output,
        None => last,
    };
    Ok(unembed_row(model, h.row(0)))
}

pub(crate) fn layer_norm<T: Scalar>(x: &Mat<T>, ln: &LayerNorm<T>, eps: f64) -> NormRecord<T> {
    let d = x.cols;
    let n = T::lit(d as f64);
    let eps = T::lit(eps);
    let mut mean = Vec::with_capacity(x.rows);
    let mut std = Vec::with_capacity(x.rows);
    let mut normed = Mat::zeros(x.rows, d);
    let mut output = Mat::zeros(x.rows, d);
    for r in 0..x.rows {
        let row = x.row(r);
        let mu = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        let sd = (var + eps).sqrt();
        for c in 0..d {
            let xh = (row[c] - mu) / sd;
            *normed.at_mut(r, c) = xh;
            *output.at_mut(r, c) = ln.gamma[c] * xh + ln.beta[c];
        }
        mean.push(mu);
        std.push(sd);
    }
    NormRecord {
        input: x.clone(),
        mean,
        std,
        normed,
        output,
    }
}

#[allow(clippy::type_complexity)]
fn attention<T: Scalar>(
    cfg: &ModelConfig,
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
) -> (Vec<Mat<T>>, Vec<Mat<T>>, Mat<T>) {
    let s = q.rows;
    let dh = cfg.d_head;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut scores = Vec::with_capacity(cfg.n_heads);
    let mut attn = Vec::with_capacity(cfg.n_heads);
    let mut z = Mat::zeros(s, cfg.d_model);
    for h in 0..cfg.n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut sc = Mat::zeros(s, s);
        let mut a = Mat::zeros(s, s);
        for i in 0..s {
            let qi = &q.row(i)[cols.clone()];
            let mut max = T::neg_infinity();
            for j in 0..=i {
                let val = dot(qi, &k.row(j)[cols.clone()]) * scale;
                *sc.at_mut(i, j) = val;
                if val > max {
                    max = val;
                }
            }
            let mut total = T::zero();
            for j in 0..=i {
                let e = (sc.at(i, j) - max).exp();
                *a.at_mut(i, j) = e;
                total += e;
            }
            for j in 0..=i {
                *a.at_mut(i, j) = a.at(i, j) / total;
            }
            let zi = &mut z.row_mut(i)[cols.clone()];
            for j in 0..=i {
                let aij = a.at(i, j);
                for (o, &vv) in zi.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += aij * vv;
                }
            }
        }
        scores.push(sc);
        attn.push(a);
    }
    (scores, attn, z)
}
