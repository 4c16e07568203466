//! Answer recall, PLA/ILA aggregation, and entropy-threshold calibration.

use serde::{Deserialize, Serialize};

use crate::decoding::{decode, DecodeConfig, DecodeMethod, Prompt};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::Model;
use crate::scalar::Scalar;

/// Lowercase, punctuation to spaces, whitespace-split.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Best fraction of an alias's words found in the output.
pub fn answer_recall(output: &str, answers: &[String]) -> f64 {
    let out = normalize_words(output);
    answers
        .iter()
        .map(|a| {
            let gold = normalize_words(a);
            if gold.is_empty() {
                return 0.0;
            }
            let hit = gold.iter().filter(|w| out.contains(w)).count();
            hit as f64 / gold.len() as f64
        })
        .fold(0.0, f64::max)
}

/// PLA and ILA from per-sample constraint outcomes.
pub fn pla_ila(outcomes: &[Vec<bool>]) -> Result<(f64, f64)> {
    if outcomes.is_empty() || outcomes.iter().any(Vec::is_empty) {
        return Err(Error::Data("every sample needs at least one constraint".into()));
    }
    let all = outcomes.iter().filter(|o| o.iter().all(|&b| b)).count();
    let total: usize = outcomes.iter().map(Vec::len).sum();
    let ok: usize = outcomes.iter().map(|o| o.iter().filter(|&&b| b).count()).sum();
    Ok((all as f64 / outcomes.len() as f64, ok as f64 / total as f64))
}

/// Nearest-rank percentile: the `ceil(p·n)`-th smallest value.
pub fn nearest_rank(values: &[f64], percentile: f64) -> Result<f64> {
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(Error::Data(format!("percentile {percentile} outside (0, 1)")));
    }
    if values.is_empty() {
        return Err(Error::Data("empty entropy pool".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((percentile * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau: f64,
    pub percentile: f64,
    pub n_steps: usize,
    pub n_prompts: usize,
}

/// Greedy-decodes every prompt and returns the nearest-rank entropy
/// percentile over all steps.
pub fn calibrate_entropy_threshold<T: Scalar>(
    model: &Model<T>,
    prompts: &[Prompt],
    percentile: f64,
    max_new_tokens: usize,
    stop_tokens: &[u32],
    exec: Exec,
) -> Result<Calibration> {
    if prompts.is_empty() {
        return Err(Error::Data("no calibration prompts".into()));
    }
    let mut cfg = DecodeConfig::new(DecodeMethod::Greedy, max_new_tokens)
        .with_stop(stop_tokens.iter().copied());
    cfg.exec = Exec::Sequential;
    let runs = exec.try_map(prompts, |p| decode(model, p, &cfg))?;
    let entropies: Vec<f64> = runs
        .iter()
        .flat_map(|r| r.steps.iter().map(|s| s.entropy))
        .collect();
    Ok(Calibration {
        tau: nearest_rank(&entropies, percentile)?,
        percentile,
        n_steps: entropies.len(),
        n_prompts: prompts.len(),
    })
}
