//! Context-retrieval versus parametric attention heads from counterfactual
//! question answering.
//!
//! For every head, `D = mean_OB r_h(c_cf) − mean_CB r_h(c_gold)`: the head's
//! relevance to the context-supported answer when the context is shown,
//! minus its relevance to the memorized answer when it is not.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, AttributionMethod, LrpConfig};
use crate::decoding::{Prompt, RoiSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::forward::forward;
use crate::harness::{qa_prompt, QaFormat};
use crate::model::Model;
use crate::scalar::{Mat, Scalar};
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualSample {
    pub question: String,
    pub counterfactual_context: String,
    /// Answer supported by the counterfactual context.
    pub c_cf: String,
    /// Answer the model holds without context.
    pub c_gold: String,
}

impl CounterfactualSample {
    pub fn validate(&self) -> Result<()> {
        if self.counterfactual_context.is_empty() {
            return Err(Error::Data("empty counterfactual context".into()));
        }
        if self.c_cf.is_empty() || self.c_gold.is_empty() {
            return Err(Error::Data("empty answer target".into()));
        }
        Ok(())
    }
}

/// Which answer tokens are explained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// The first answer token only.
    #[default]
    First,
    /// Every answer token, teacher-forced, averaged.
    MeanOverAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub d_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSets {
    pub n: usize,
    pub ctx_heads: Vec<(usize, usize)>,
    pub param_heads: Vec<(usize, usize)>,
    pub scores: Vec<HeadScore>,
}

impl HeadSets {
    pub fn ctx_roi(&self) -> RoiSpec {
        RoiSpec::HeadSet(self.ctx_heads.clone())
    }

    pub fn param_roi(&self) -> RoiSpec {
        RoiSpec::HeadSet(self.param_heads.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreConfig {
    pub method: AttributionMethod,
    #[serde(default)]
    pub lrp: LrpConfig,
    #[serde(default)]
    pub format: QaFormat,
    #[serde(default)]
    pub target: TargetMode,
}

/// `n_layers × n_heads` relevance of every head to `answer` following
/// `prompt`.
pub fn head_relevance_matrix<T: Scalar>(
    model: &Model<T>,
    prompt: &Prompt,
    answer: &str,
    cfg: &HeadScoreConfig,
) -> Result<Mat<f64>> {
    let answer: Vec<TokenId> = Tokenizer.encode(answer);
    if answer.is_empty() {
        return Err(Error::Data("empty answer target".into()));
    }
    let steps = match cfg.target {
        TargetMode::First => 1,
        TargetMode::MeanOverAnswer => answer.len(),
    };
    let c = &model.config;
    let mut acc = Mat::<f64>::zeros(c.n_layers, c.n_heads);
    let mut tokens = prompt.tokens.clone();
    for &target in &answer[..steps] {
        let (_, cache) = forward(model, &tokens)?;
        let map = attribute(model, &cache, target, cfg.method, &cfg.lrp)?;
        for (a, r) in acc.data.iter_mut().zip(&map.head_relevance.data) {
            *a += r.as_f64();
        }
        tokens.push(target);
    }
    for a in acc.data.iter_mut() {
        *a /= steps as f64;
    }
    Ok(acc)
}

/// Difference score for every head, in `(layer, head)` order.
pub fn head_difference_scores<T: Scalar>(
    model: &Model<T>,
    samples: &[CounterfactualSample],
    cfg: &HeadScoreConfig,
    exec: Exec,
) -> Result<Vec<HeadScore>> {
    if samples.is_empty() {
        return Err(Error::Data("no counterfactual samples".into()));
    }
    samples.iter().try_for_each(CounterfactualSample::validate)?;
    let per_sample = exec.try_map(samples, |s| {
        let ob = qa_prompt(&s.question, Some(&s.counterfactual_context), cfg.format);
        let cb = qa_prompt(&s.question, None, cfg.format);
        Ok::<_, Error>((
            head_relevance_matrix(model, &ob, &s.c_cf, cfg)?,
            head_relevance_matrix(model, &cb, &s.c_gold, cfg)?,
        ))
    })?;
    let c = &model.config;
    let mut ob = vec![0.0; c.total_heads()];
    let mut cb = vec![0.0; c.total_heads()];
    for (o, b) in &per_sample {
        for i in 0..ob.len() {
            ob[i] += o.data[i];
            cb[i] += b.data[i];
        }
    }
    let n = samples.len() as f64;
    Ok((0..c.n_layers)
        .flat_map(|layer| (0..c.n_heads).map(move |head| (layer, head)))
        .map(|(layer, head)| {
            let i = layer * c.n_heads + head;
            HeadScore {
                layer,
                head,
                d_value: ob[i] / n - cb[i] / n,
            }
        })
        .collect())
}

/// Top-`n` heads by `D` (context) and bottom-`n` (parametric). Ties resolve
/// to the lower `(layer, head)`.
pub fn extract_head_sets(scores: &[HeadScore], n: usize) -> Result<HeadSets> {
    if n == 0 {
        return Err(Error::Data("n must be >= 1".into()));
    }
    if 2 * n > scores.len() {
        return Err(Error::Data(format!(
            "n = {n} needs {} heads, model has {}",
            2 * n,
            scores.len()
        )));
    }
    let keys: BTreeSet<(usize, usize)> = scores.iter().map(|s| (s.layer, s.head)).collect();
    if keys.len() != scores.len() {
        return Err(Error::Data("duplicate heads in score list".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.d_value.is_finite()) {
        return Err(Error::Data(format!("non-finite score for head ({}, {})", s.layer, s.head)));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by_key(|s| (s.layer, s.head));
    let mut desc = sorted.clone();
    desc.sort_by(|a, b| b.d_value.total_cmp(&a.d_value));
    let mut asc = sorted.clone();
    asc.sort_by(|a, b| a.d_value.total_cmp(&b.d_value));
    Ok(HeadSets {
        n,
        ctx_heads: desc[..n].iter().map(|s| (s.layer, s.head)).collect(),
        param_heads: asc[..n].iter().map(|s| (s.layer, s.head)).collect(),
        scores: sorted,
    })
}
