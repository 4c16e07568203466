//! Attribution-guided token selection and its entropy gate.

use serde::{Deserialize, Serialize};

use super::select::{argmax, select_candidates, shannon_entropy, CandidateSet};
use super::{ChosenReason, RoiSpec, StepTrace};
use crate::attribution::{attribute, roi_score, AttributionMethod, LrpConfig};
use crate::error::Result;
use crate::exec::Exec;
use crate::forward::{forward, ActivationCache};
use crate::model::Model;
use crate::scalar::{softmax, Scalar};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgdConfig {
    pub attr_method: AttributionMethod,
    #[serde(default)]
    pub lrp: LrpConfig,
    pub roi: RoiSpec,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_pi_min")]
    pub pi_min: f64,
    /// Entropy gate in nats; `None` guides every step.
    #[serde(default)]
    pub tau: Option<f64>,
}

pub(crate) fn default_k() -> usize {
    5
}

pub(crate) fn default_pi_min() -> f64 {
    0.05
}

/// One scored candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub token: TokenId,
    pub score: f64,
}

/// Highest score; ties go to the higher probability, then the lower id.
pub fn pick_by_score(candidates: &CandidateSet, scores: &[f64]) -> TokenId {
    assert_eq!(candidates.len(), scores.len());
    let mut best = 0usize;
    for i in 1..scores.len() {
        let (a, b) = (&candidates.entries[i], &candidates.entries[best]);
        let better = scores[i] > scores[best]
            || (scores[i] == scores[best]
                && (a.probability > b.probability
                    || (a.probability == b.probability && a.token < b.token)));
        if better {
            best = i;
        }
    }
    candidates.entries[best].token
}

/// Scores every candidate against `roi`, in candidate order.
pub fn score_candidates<T: Scalar>(
    model: &Model<T>,
    cache: &ActivationCache<T>,
    candidates: &CandidateSet,
    roi: &RoiSpec,
    method: AttributionMethod,
    lrp: &LrpConfig,
    exec: Exec,
) -> Result<Vec<f64>> {
    exec.try_map(&candidates.entries, |c| {
        let map = attribute(model, cache, c.token, method, lrp)?;
        Ok(roi_score(&map, roi)?.as_f64())
    })
}

pub(crate) fn agd_from_cache<T: Scalar>(
    model: &Model<T>,
    cache: &ActivationCache<T>,
    probs: &[T],
    entropy: f64,
    cfg: &AgdConfig,
    exec: Exec,
) -> Result<(TokenId, StepTrace)> {
    let mut candidates = select_candidates(probs, cfg.k, cfg.pi_min)?;
    candidates.attach_logits(&cache.logits);
    let scores = score_candidates(model, cache, &candidates, &cfg.roi, cfg.attr_method, &cfg.lrp, exec)?;
    let chosen = pick_by_score(&candidates, &scores);
    let scored = candidates
        .entries
        .iter()
        .zip(&scores)
        .map(|(c, &score)| Scored {
            token: c.token,
            score,
        })
        .collect();
    Ok((
        chosen,
        StepTrace {
            step: 0,
            entropy,
            gated: true,
            candidates,
            scores: scored,
            chosen,
            chosen_reason: ChosenReason::AttributionArgmax,
        },
    ))
}

/// Picks the candidate with the largest ROI attribution for the next token
/// after `tokens`.
pub fn agd_select<T: Scalar>(
    model: &Model<T>,
    tokens: &[TokenId],
    cfg: &AgdConfig,
    exec: Exec,
) -> Result<(TokenId, StepTrace)> {
    let (logits, cache) = forward(model, tokens)?;
    let probs = softmax(&logits);
    let entropy = shannon_entropy(&probs)?;
    agd_from_cache(model, &cache, &probs, entropy, cfg, exec)
}

/// Greedy below the entropy threshold, attribution-guided at or above it.
pub fn gated_step<T: Scalar>(
    model: &Model<T>,
    tokens: &[TokenId],
    cfg: &AgdConfig,
    exec: Exec,
) -> Result<(TokenId, StepTrace)> {
    let (logits, cache) = forward(model, tokens)?;
    let probs = softmax(&logits);
    gated_from_cache(model, &cache, &probs, cfg, exec)
}

pub(crate) fn gated_from_cache<T: Scalar>(
    model: &Model<T>,
    cache: &ActivationCache<T>,
    probs: &[T],
    cfg: &AgdConfig,
    exec: Exec,
) -> Result<(TokenId, StepTrace)> {
    let entropy = shannon_entropy(probs)?;
    let tau = cfg.tau.unwrap_or(0.0);
    if entropy < tau {
        let chosen = argmax(probs);
        let mut candidates = select_candidates(probs, cfg.k, cfg.pi_min)?;
        candidates.attach_logits(&cache.logits);
        return Ok((
            chosen,
            StepTrace {
                step: 0,
                entropy,
                gated: false,
                candidates,
                scores: Vec::new(),
                chosen,
                chosen_reason: ChosenReason::Greedy,
            },
        ));
    }
    agd_from_cache(model, cache, probs, entropy, cfg, exec)
}
