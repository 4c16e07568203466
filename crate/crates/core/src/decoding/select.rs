//! Per-step distribution utilities: candidate sets, entropy, and the
//! logit adjustments of the baseline decoders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: TokenId,
    pub probability: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logit: Option<f64>,
}

/// Candidates in descending probability (ties: ascending token id).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidateSet {
    pub entries: Vec<Candidate>,
    /// The threshold removed every top-k entry and the top-1 token was kept.
    #[serde(default)]
    pub fallback: bool,
}

impl CandidateSet {
    pub fn tokens(&self) -> Vec<TokenId> {
        self.entries.iter().map(|c| c.token).collect()
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.entries.iter().any(|c| c.token == token)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn attach_logits<T: Scalar>(&mut self, logits: &[T]) {
        for c in self.entries.iter_mut() {
            c.logit = logits.get(c.token as usize).map(|l| l.as_f64());
        }
    }

    pub fn probability(&self, token: TokenId) -> Option<f64> {
        self.entries
            .iter()
            .find(|c| c.token == token)
            .map(|c| c.probability)
    }
}

/// Sum tolerance for a distribution of element type `T`.
fn sum_tolerance<T: Scalar>() -> f64 {
    (100.0 * T::epsilon().as_f64()).max(1e-6)
}

pub fn check_distribution<T: Scalar>(probs: &[T]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidDistribution("empty".into()));
    }
    let mut total = 0.0f64;
    for (i, &p) in probs.iter().enumerate() {
        let p = p.as_f64();
        if !p.is_finite() || p < 0.0 {
            return Err(Error::InvalidDistribution(format!("entry {i} = {p}")));
        }
        total += p;
    }
    if (total - 1.0).abs() > sum_tolerance::<T>() {
        return Err(Error::InvalidDistribution(format!("sums to {total}")));
    }
    Ok(())
}

/// `true` when `(pa, a)` ranks ahead of `(pb, b)`.
#[inline]
fn ahead<T: Scalar>(pa: T, a: usize, pb: T, b: usize) -> bool {
    pa > pb || (pa == pb && a < b)
}

/// Highest-probability token, lowest id on ties.
pub fn argmax<T: Scalar>(values: &[T]) -> TokenId {
    let mut best = 0usize;
    for i in 1..values.len() {
        if ahead(values[i], i, values[best], best) {
            best = i;
        }
    }
    best as TokenId
}

/// Top-`k` tokens with probability at least `pi_min`; if none survive the
/// threshold, the single most probable token.
pub fn select_candidates<T: Scalar>(probs: &[T], k: usize, pi_min: f64) -> Result<CandidateSet> {
    check_distribution(probs)?;
    if k == 0 {
        return Err(Error::InvalidDecodeConfig("k must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&pi_min) {
        return Err(Error::InvalidDecodeConfig(format!(
            "pi_min {pi_min} outside [0, 1)"
        )));
    }
    // bounded insertion: keep the best k seen so far, ordered
    let mut top: Vec<usize> = Vec::with_capacity(k + 1);
    for (i, &p) in probs.iter().enumerate() {
        if top.len() == k {
            let last = top[k - 1];
            if !ahead(p, i, probs[last], last) {
                continue;
            }
        }
        let pos = top
            .iter()
            .position(|&j| ahead(p, i, probs[j], j))
            .unwrap_or(top.len());
        top.insert(pos, i);
        top.truncate(k);
    }
    let make = |i: usize| Candidate {
        token: i as TokenId,
        probability: probs[i].as_f64(),
        logit: None,
    };
    let entries: Vec<Candidate> = top
        .iter()
        .copied()
        .filter(|&i| probs[i].as_f64() >= pi_min)
        .map(make)
        .collect();
    if entries.is_empty() {
        Ok(CandidateSet {
            entries: vec![make(top[0])],
            fallback: true,
        })
    } else {
        Ok(CandidateSet {
            entries,
            fallback: false,
        })
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy<T: Scalar>(probs: &[T]) -> Result<f64> {
    check_distribution(probs)?;
    let h: f64 = probs
        .iter()
        .map(|p| p.as_f64())
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(h.max(0.0))
}

/// Smallest descending-probability prefix with mass at least `p`,
/// renormalized.
pub fn nucleus_filter<T: Scalar>(probs: &[T], p: f64) -> Result<Vec<(TokenId, f64)>> {
    check_distribution(probs)?;
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidDecodeConfig(format!("nucleus p {p} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("finite")
            .then(a.cmp(&b))
    });
    let mut support = Vec::new();
    let mut mass = 0.0f64;
    for i in order {
        let pi = probs[i].as_f64();
        support.push((i as TokenId, pi));
        mass += pi;
        if mass >= p {
            break;
        }
    }
    Ok(support.into_iter().map(|(t, pi)| (t, pi / mass)).collect())
}

/// Draws from a filtered support with a uniform `u ∈ [0, 1)`.
pub fn sample_support(support: &[(TokenId, f64)], u: f64) -> TokenId {
    let mut acc = 0.0;
    for &(t, p) in support {
        acc += p;
        if u < acc {
            return t;
        }
    }
    support.last().expect("non-empty support").0
}

/// Context-aware decoding: `(1 + α)·full − α·context_free`.
pub fn cad_logits<T: Scalar>(full: &[T], context_free: &[T], alpha: f64) -> Result<Vec<T>> {
    if full.len() != context_free.len() {
        return Err(Error::InvalidDecodeConfig(format!(
            "logit length mismatch: {} vs {}",
            full.len(),
            context_free.len()
        )));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidDecodeConfig(format!("alpha {alpha} must be >= 0")));
    }
    let a = T::lit(alpha);
    let one_a = T::one() + a;
    Ok(full
        .iter()
        .zip(context_free)
        .map(|(&f, &c)| one_a * f - a * c)
        .collect())
}

/// Layer-contrast scores: `log p_final − log p_early` on tokens with
/// `p_final ≥ β · max p_final`, `−∞` elsewhere.
pub fn dola_scores<T: Scalar>(final_logp: &[T], early_logp: &[T], beta: f64) -> Result<Vec<T>> {
    if final_logp.len() != early_logp.len() {
        return Err(Error::InvalidDecodeConfig("log-prob length mismatch".into()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidDecodeConfig(format!("beta {beta} outside [0, 1]")));
    }
    let max = final_logp
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, x| if x > m { x } else { m });
    let cutoff = if beta > 0.0 {
        max + T::lit(beta.ln())
    } else {
        T::neg_infinity()
    };
    Ok(final_logp
        .iter()
        .zip(early_logp)
        .map(|(&f, &e)| if f >= cutoff { f - e } else { T::neg_infinity() })
        .collect())
}

/// Argmax of `scores`, ties broken by higher `probs`, then lower id.
pub fn argmax_with_tiebreak<T: Scalar>(scores: &[T], probs: &[T]) -> TokenId {
    let mut best = 0usize;
    for i in 1..scores.len() {
        let better = scores[i] > scores[best]
            || (scores[i] == scores[best]
                && (probs[i] > probs[best] || (probs[i] == probs[best] && i < best)));
        if better {
            best = i;
        }
    }
    best as TokenId
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five() -> Vec<f64> {
        vec![0.5, 0.3, 0.15, 0.04, 0.01]
    }

    #[test]
    fn threshold_and_truncation() {
        let c = select_candidates(&five(), 5, 0.05).unwrap();
        assert_eq!(c.tokens(), vec![0, 1, 2]);
        assert!(!c.fallback);
        let c = select_candidates(&five(), 2, 0.05).unwrap();
        assert_eq!(c.tokens(), vec![0, 1]);
    }

    #[test]
    fn fallback_singleton() {
        let mut p = vec![0.03f64; 33];
        p.push(1.0 - 0.03 * 33.0);
        p[7] = 0.03 + 1e-3;
        p[33] -= 1e-3;
        let c = select_candidates(&p, 5, 0.05).unwrap();
        assert!(c.fallback);
        assert_eq!(c.tokens(), vec![7]);
    }

    #[test]
    fn ties_break_by_id() {
        let c = select_candidates(&[0.25f64, 0.25, 0.25, 0.25], 3, 0.0).unwrap();
        assert_eq!(c.tokens(), vec![0, 1, 2]);
        assert_eq!(argmax(&[0.1f64, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn malformed_distribution() {
        assert!(select_candidates(&[0.5f64, 0.6], 2, 0.0).is_err());
        assert!(select_candidates(&[-0.1f64, 1.1], 2, 0.0).is_err());
        assert!(shannon_entropy(&[f64::NAN, 1.0]).is_err());
        assert!(select_candidates(&[1.0f64], 0, 0.0).is_err());
    }

    #[test]
    fn entropy_values() {
        let h = shannon_entropy(&[0.25f64; 4]).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-12);
        assert!((h - 1.386294).abs() < 1e-6);
        assert_eq!(shannon_entropy(&[0.0f64, 1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn nucleus_cases() {
        let s = nucleus_filter(&[0.6f64, 0.3, 0.1], 0.85).unwrap();
        assert_eq!(s.len(), 2);
        assert!((s[0].1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((s[1].1 - 1.0 / 3.0).abs() < 1e-12);
        let s = nucleus_filter(&[0.6f64, 0.3, 0.1], 1.0).unwrap();
        assert_eq!(s.len(), 3);
        assert!((s[2].1 - 0.1).abs() < 1e-12);
        let s = nucleus_filter(&[0.2f64, 0.5, 0.3], 1e-9).unwrap();
        assert_eq!(s, vec![(1, 1.0)]);
        assert!(nucleus_filter(&[1.0f64], 0.0).is_err());
        assert_eq!(sample_support(&[(4, 0.5), (9, 0.5)], 0.7), 9);
    }

    #[test]
    fn cad_formula() {
        assert_eq!(cad_logits(&[2.0f64, -1.0], &[0.5, 3.0], 0.0).unwrap(), vec![2.0, -1.0]);
        assert_eq!(cad_logits(&[2.0f64], &[0.5], 1.0).unwrap(), vec![3.5]);
        assert!(cad_logits(&[1.0f64], &[1.0, 2.0], 1.0).is_err());
        assert!(cad_logits(&[1.0f64], &[1.0], -1.0).is_err());
    }

    #[test]
    fn dola_hand_case() {
        let f: Vec<f64> = [0.5f64, 0.4, 0.1].iter().map(|p| p.ln()).collect();
        let e: Vec<f64> = [0.45f64, 0.1, 0.45].iter().map(|p| p.ln()).collect();
        let s = dola_scores(&f, &e, 0.1).unwrap();
        let probs = [0.5, 0.4, 0.1];
        assert_eq!(argmax_with_tiebreak(&s, &probs), 1);
        // self-contrast: constant scores, tie broken by probability
        let s = dola_scores(&f, &f, 0.1).unwrap();
        assert_eq!(argmax_with_tiebreak(&s, &probs), 0);
        // beta = 1 keeps only the greedy token
        let s = dola_scores(&f, &e, 1.0).unwrap();
        assert!(s[1].is_infinite() && s[2].is_infinite());
        assert_eq!(argmax_with_tiebreak(&s, &probs), 0);
    }
}
