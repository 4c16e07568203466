//! Reverse-mode gradients through the cached forward pass.
//!
//! One backward routine serves both Input×Gradient attribution (seeded with
//! a readout direction at the last position) and training (seeded with the
//! cross-entropy gradient at every position, with parameter gradients).

use crate::error::{Error, Result};
use crate::forward::{ActivationCache, NormRecord};
use crate::model::{LayerNorm, Linear, Model};
use crate::scalar::{Mat, Scalar};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// d/d(input embeddings), `seq × d_model`.
    pub embeddings: Mat<T>,
    /// d/d(residual stream entering block l); index `n_layers` is the stream
    /// after the last block. Index 0 equals `embeddings`.
    pub residual: Vec<Mat<T>>,
    /// d/d(z^h) per layer, heads concatenated.
    pub z: Vec<Mat<T>>,
    /// d/d(residual between the attention and MLP branches) per layer; this
    /// is also the gradient w.r.t. the attention block output.
    pub mid: Vec<Mat<T>>,
    /// Parameter gradients laid out as a model, when requested.
    pub params: Option<Model<T>>,
}

/// Gradient of `logit[target]` at the last position with respect to each
/// input embedding vector (`seq × d_model`).
pub fn input_gradient<T: Scalar>(
    model: &Model<T>,
    cache: &ActivationCache<T>,
    target: TokenId,
) -> Result<Mat<T>> {
    let dir = readout_direction(model, target)?;
    Ok(readout_gradients(model, cache, &dir)?.embeddings)
}

/// Unembedding column of `target`.
pub fn readout_direction<T: Scalar>(model: &Model<T>, target: TokenId) -> Result<Vec<T>> {
    let t = target as usize;
    if t >= model.config.vocab_size {
        return Err(Error::TokenOutOfRange {
            id: t,
            vocab: model.config.vocab_size,
        });
    }
    Ok((0..model.config.d_model)
        .map(|k| model.unembedding.at(k, t))
        .collect())
}

/// Gradients of `final_hidden[last] · direction`.
pub fn readout_gradients<T: Scalar>(
    model: &Model<T>,
    cache: &ActivationCache<T>,
    direction: &[T],
) -> Result<Gradients<T>> {
    cache.check_model(model)?;
    if direction.len() != model.config.d_model {
        return Err(Error::IndexOutOfRange(format!(
            "readout direction has {} entries, d_model is {}",
            direction.len(),
            model.config.d_model
        )));
    }
    let s = cache.seq_len();
    let mut seed = Mat::zeros(s, model.config.d_model);
    seed.row_mut(s - 1).copy_from_slice(direction);
    Ok(backward(model, cache, seed, None))
}

pub(crate) fn zeros_like<T: Scalar>(model: &Model<T>) -> Model<T> {
    let tensors = Model::<T>::expected_layout(&model.config)
        .into_iter()
        .map(|(_, shape)| vec![T::zero(); shape.iter().product()])
        .collect();
    Model::from_tensors(model.config.clone(), tensors).expect("zero model is valid")
}

/// Backpropagates `d_final_hidden` (gradient w.r.t. the unembedding input at
/// every position). When `params` is given, parameter gradients are
/// accumulated into it (the unembedding gradient is the caller's business).
pub fn backward<T: Scalar>(
    model: &Model<T>,
    cache: &ActivationCache<T>,
    d_final_hidden: Mat<T>,
    mut params: Option<Model<T>>,
) -> Gradients<T> {
    let cfg = &model.config;
    let mut d = match (&model.final_norm, &cache.final_norm) {
        (Some(ln), Some(rec)) => {
            let g = params.as_mut().and_then(|p| p.final_norm.as_mut());
            norm_backward(rec, ln, &d_final_hidden, g)
        }
        _ => d_final_hidden,
    };
    let mut residual = vec![Mat::zeros(0, 0); cfg.n_layers + 1];
    let mut z_grads = vec![Mat::zeros(0, 0); cfg.n_layers];
    let mut mid_grads = vec![Mat::zeros(0, 0); cfg.n_layers];
    residual[cfg.n_layers] = d.clone();
    for l in (0..cfg.n_layers).rev() {
        let block = &model.blocks[l];
        let rec = &cache.layers[l];
        let mut gb = params.as_mut().map(|p| &mut p.blocks[l]);

        // MLP branch
        let d_act = linear_backward(
            &rec.ff_act,
            &d,
            &block.ff2,
            gb.as_deref_mut().map(|b| &mut b.ff2),
        );
        let mut d_pre = d_act;
        for (g, &u) in d_pre.data.iter_mut().zip(&rec.ff_pre.data) {
            *g *= cfg.activation.derivative(u);
        }
        let d_ln2 = linear_backward(
            &rec.ln2.output,
            &d_pre,
            &block.ff1,
            gb.as_deref_mut().map(|b| &mut b.ff1),
        );
        let d_mid_branch =
            norm_backward(&rec.ln2, &block.ln2, &d_ln2, gb.as_deref_mut().map(|b| &mut b.ln2));
        let mut d_mid = d;
        d_mid.add_assign(&d_mid_branch);
        mid_grads[l] = d_mid.clone();

        // attention branch
        let d_z = linear_backward(&rec.z, &d_mid, &block.o, gb.as_deref_mut().map(|b| &mut b.o));
        let (dq, dk, dv) = attention_backward(cfg.n_heads, cfg.d_head, rec, &d_z);
        let mut d_ln1 =
            linear_backward(&rec.ln1.output, &dq, &block.q, gb.as_deref_mut().map(|b| &mut b.q));
        d_ln1.add_assign(&linear_backward(
            &rec.ln1.output,
            &dk,
            &block.k,
            gb.as_deref_mut().map(|b| &mut b.k),
        ));
        d_ln1.add_assign(&linear_backward(
            &rec.ln1.output,
            &dv,
            &block.v,
            gb.as_deref_mut().map(|b| &mut b.v),
        ));
        let d_in_branch =
            norm_backward(&rec.ln1, &block.ln1, &d_ln1, gb.as_deref_mut().map(|b| &mut b.ln1));
        let mut d_in = d_mid;
        d_in.add_assign(&d_in_branch);
        residual[l] = d_in.clone();
        z_grads[l] = d_z;
        d = d_in;
    }
    if let Some(p) = params.as_mut() {
        for (i, &t) in cache.tokens.iter().enumerate() {
            for (g, &v) in p.token_embedding.row_mut(t as usize).iter_mut().zip(d.row(i)) {
                *g += v;
            }
            for (g, &v) in p.position_embedding.row_mut(i).iter_mut().zip(d.row(i)) {
                *g += v;
            }
        }
    }
    Gradients {
        embeddings: d,
        residual,
        z: z_grads,
        mid: mid_grads,
        params,
    }
}

fn linear_backward<T: Scalar>(
    x: &Mat<T>,
    dy: &Mat<T>,
    lin: &Linear<T>,
    grad: Option<&mut Linear<T>>,
) -> Mat<T> {
    if let Some(g) = grad {
        x.t_matmul_into(dy, &mut g.w);
        for r in 0..dy.rows {
            for (b, &v) in g.b.iter_mut().zip(dy.row(r)) {
                *b += v;
            }
        }
    }
    dy.matmul_t(&lin.w)
}

fn norm_backward<T: Scalar>(
    rec: &NormRecord<T>,
    ln: &LayerNorm<T>,
    dy: &Mat<T>,
    mut grad: Option<&mut LayerNorm<T>>,
) -> Mat<T> {
    let d = dy.cols;
    let n = T::lit(d as f64);
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxh = vec![T::zero(); d];
    for r in 0..dy.rows {
        let xh = rec.normed.row(r);
        let g = dy.row(r);
        if let Some(gr) = grad.as_deref_mut() {
            for c in 0..d {
                gr.gamma[c] += g[c] * xh[c];
                gr.beta[c] += g[c];
            }
        }
        for c in 0..d {
            dxh[c] = g[c] * ln.gamma[c];
        }
        let mean_d = dxh.iter().copied().sum::<T>() / n;
        let mean_dx = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        let inv = T::one() / rec.std[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = inv * (dxh[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

fn attention_backward<T: Scalar>(
    n_heads: usize,
    dh: usize,
    rec: &crate::forward::LayerRecord<T>,
    d_z: &Mat<T>,
) -> (Mat<T>, Mat<T>, Mat<T>) {
    let s = d_z.rows;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = Mat::zeros(s, d_z.cols);
    let mut dk = Mat::zeros(s, d_z.cols);
    let mut dv = Mat::zeros(s, d_z.cols);
    let mut d_a = vec![T::zero(); s];
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let a = &rec.attn[h];
        for i in 0..s {
            let dzi = &d_z.row(i)[cols.clone()];
            let mut weighted = T::zero();
            for j in 0..=i {
                let vj = &rec.v.row(j)[cols.clone()];
                d_a[j] = crate::scalar::dot(dzi, vj);
                weighted += a.at(i, j) * d_a[j];
                let aij = a.at(i, j);
                for (o, &g) in dv.row_mut(j)[cols.clone()].iter_mut().zip(dzi) {
                    *o += aij * g;
                }
            }
            for j in 0..=i {
                let ds = a.at(i, j) * (d_a[j] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                for c in cols.clone() {
                    *dq.at_mut(i, c) += ds * rec.k.at(j, c);
                    *dk.at_mut(j, c) += ds * rec.q.at(i, c);
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{embed, forward, forward_embeddings};
    use crate::model::ModelConfig;

    #[test]
    fn zero_layer_gradient_is_unembedding_column() {
        let m = Model::<f64>::random(ModelConfig::toy(0, 2, 8), 1).unwrap();
        let (_, cache) = forward(&m, &[3, 4, 5]).unwrap();
        let g = input_gradient(&m, &cache, 17).unwrap();
        for k in 0..8 {
            assert_eq!(g.at(2, k), m.unembedding.at(k, 17));
            assert_eq!(g.at(0, k), 0.0);
        }
    }

    #[test]
    fn matches_central_differences() {
        let m = Model::<f64>::random(ModelConfig::toy(2, 2, 8), 7).unwrap();
        let tokens = [256, 10, 20, 30];
        let (_, cache) = forward(&m, &tokens).unwrap();
        let target = 42;
        let g = input_gradient(&m, &cache, target).unwrap();
        let x0 = embed(&m, &tokens);
        let h = 1e-4;
        for i in 0..tokens.len() {
            for k in 0..8 {
                let mut plus = x0.clone();
                *plus.at_mut(i, k) += h;
                let mut minus = x0.clone();
                *minus.at_mut(i, k) -= h;
                let lp = forward_embeddings(&m, &tokens, plus).logits[target as usize];
                let lm = forward_embeddings(&m, &tokens, minus).logits[target as usize];
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - g.at(i, k)).abs() <= 1e-3 * fd.abs().max(1e-3),
                    "({i},{k}) fd {fd} vs {}",
                    g.at(i, k)
                );
            }
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let a = Model::<f64>::random(ModelConfig::toy(1, 2, 8), 1).unwrap();
        let b = Model::<f64>::random(ModelConfig::toy(2, 2, 8), 1).unwrap();
        let (_, cache) = forward(&a, &[1, 2]).unwrap();
        assert!(matches!(input_gradient(&b, &cache, 0), Err(Error::StaleCache(_))));
        assert!(matches!(
            input_gradient(&a, &cache, 10_000),
            Err(Error::TokenOutOfRange { .. })
        ));
    }
}
