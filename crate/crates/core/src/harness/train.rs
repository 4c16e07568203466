//! Next-token cross-entropy training with plain SGD.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::toy::TrainSequence;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::forward::{all_logits, check_tokens, forward};
use crate::grad::{backward, zeros_like};
use crate::model::{Model, ModelConfig};
use crate::scalar::{log_softmax, Mat, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Loss is logged every `log_every` steps.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_batch() -> usize {
    8
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_log_every() -> usize {
    50
}

impl TrainConfig {
    pub fn new(steps: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            steps,
            learning_rate,
            batch_size: default_batch(),
            clip_norm: default_clip(),
            seed,
            log_every: default_log_every(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// `(step, mean batch loss)` pairs.
    pub losses: Vec<(usize, f64)>,
}

/// Summed token loss, scored token count, and the gradient of the summed
/// loss for one sequence.
pub fn sequence_loss_grad<T: Scalar>(
    model: &Model<T>,
    seq: &TrainSequence,
) -> Result<(f64, usize, Model<T>)> {
    let (_, cache) = forward(model, &seq.tokens)?;
    let logits = all_logits(model, &cache);
    let s = seq.tokens.len();
    let v = model.config.vocab_size;
    let d = model.config.d_model;
    let mut d_logits = Mat::<T>::zeros(s, v);
    let mut loss = 0.0;
    let mut count = 0;
    for p in seq.loss_start.max(1)..s {
        let lp = log_softmax(logits.row(p - 1));
        let target = seq.tokens[p] as usize;
        loss -= lp[target].as_f64();
        count += 1;
        for (g, l) in d_logits.row_mut(p - 1).iter_mut().zip(&lp) {
            *g = l.exp();
        }
        *d_logits.at_mut(p - 1, target) -= T::one();
    }
    let mut grads = zeros_like(model);
    // unembedding: hᵀ·dL and dh = dL·Uᵀ
    cache.final_hidden.t_matmul_into(&d_logits, &mut grads.unembedding);
    let d_hidden = d_logits.matmul_t(&model.unembedding);
    debug_assert_eq!(d_hidden.cols, d);
    let g = backward(model, &cache, d_hidden, Some(grads));
    Ok((loss, count, g.params.expect("parameter gradients requested")))
}

/// Mean per-token loss over `seqs`.
pub fn mean_loss<T: Scalar>(model: &Model<T>, seqs: &[TrainSequence], exec: Exec) -> Result<f64> {
    let parts = exec.try_map(seqs, |s| sequence_loss(model, s))?;
    let (loss, count) = parts
        .iter()
        .fold((0.0, 0usize), |(l, c), &(a, b)| (l + a, c + b));
    if count == 0 {
        return Err(Error::Data("no scored tokens".into()));
    }
    Ok(loss / count as f64)
}

fn sequence_loss<T: Scalar>(model: &Model<T>, seq: &TrainSequence) -> Result<(f64, usize)> {
    let (_, cache) = forward(model, &seq.tokens)?;
    let logits = all_logits(model, &cache);
    let mut loss = 0.0;
    let mut count = 0;
    for p in seq.loss_start.max(1)..seq.tokens.len() {
        loss -= log_softmax(logits.row(p - 1))[seq.tokens[p] as usize].as_f64();
        count += 1;
    }
    Ok((loss, count))
}

fn validate_corpus(config: &ModelConfig, corpus: &[TrainSequence]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    for (i, s) in corpus.iter().enumerate() {
        check_tokens(config, &s.tokens).map_err(|e| Error::Data(format!("sequence {i}: {e}")))?;
        if s.loss_start >= s.tokens.len() {
            return Err(Error::Data(format!("sequence {i}: nothing to score")));
        }
    }
    Ok(())
}

/// Trains from the seeded initialization. Per-sequence gradients of a batch
/// are computed through `exec` and summed in batch order.
pub fn train_toy_model<T: Scalar>(
    config: ModelConfig,
    corpus: &[TrainSequence],
    train: &TrainConfig,
    exec: Exec,
) -> Result<(Model<T>, TrainLog)> {
    let mut model = Model::<T>::random(config, train.seed)?;
    let log = train_in_place(&mut model, corpus, train, exec)?;
    Ok((model, log))
}

pub fn train_in_place<T: Scalar>(
    model: &mut Model<T>,
    corpus: &[TrainSequence],
    train: &TrainConfig,
    exec: Exec,
) -> Result<TrainLog> {
    validate_corpus(&model.config, corpus)?;
    if train.batch_size == 0 || !(train.learning_rate > 0.0) {
        return Err(Error::InvalidConfig(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed);
    let mut losses = Vec::new();
    for step in 0..train.steps {
        let batch: Vec<&TrainSequence> = (0..train.batch_size)
            .map(|_| &corpus[rng.gen_range(0..corpus.len())])
            .collect();
        let parts = exec.try_map(&batch, |s| sequence_loss_grad(model, s))?;
        let mut iter = parts.into_iter();
        let (mut loss, mut count, mut grad) = iter.next().expect("batch is non-empty");
        for (l, c, g) in iter {
            loss += l;
            count += c;
            for (acc, part) in grad.tensors_mut().into_iter().zip(g.tensors()) {
                for (a, &b) in acc.iter_mut().zip(part.2) {
                    *a += b;
                }
            }
        }
        let mean = loss / count as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { step, loss: mean });
        }
        if step % train.log_every.max(1) == 0 || step + 1 == train.steps {
            losses.push((step, mean));
        }
        let mut scale = 1.0 / count as f64;
        if let Some(clip) = train.clip_norm {
            let norm_sq: f64 = grad
                .tensors()
                .iter()
                .flat_map(|t| t.2.iter())
                .map(|x| x.as_f64().powi(2))
                .sum();
            let norm = norm_sq.sqrt() * scale;
            if norm > clip {
                scale *= clip / norm;
            }
        }
        let lr = T::lit(train.learning_rate * scale);
        for (p, g) in model.tensors_mut().into_iter().zip(grad.tensors()) {
            for (w, &d) in p.iter_mut().zip(g.2) {
                *w -= lr * d;
            }
        }
        if !model.tensors().iter().all(|t| t.2.iter().all(|x| x.is_finite())) {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
    }
    Ok(TrainLog { losses })
}
