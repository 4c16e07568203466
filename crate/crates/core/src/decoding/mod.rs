//! Decoders: greedy, nucleus, context-aware (CAD), layer-contrast (DoLA),
//! and attribution-guided (AGD, optionally entropy-gated).

mod agd;
mod prompt;
mod select;

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use agd::{
    agd_select, gated_step, pick_by_score, score_candidates, AgdConfig, Scored,
};
pub use prompt::{CharSegments, Prompt, RoiSpec, SegmentKind, Segments};
pub use select::{
    argmax, argmax_with_tiebreak, cad_logits, check_distribution, dola_scores, nucleus_filter,
    sample_support, select_candidates, shannon_entropy, Candidate, CandidateSet,
};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::forward::{early_exit_logits, forward};
use crate::model::Model;
use crate::scalar::{log_softmax, softmax, Scalar};
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum DecodeMethod {
    Greedy,
    Nucleus {
        #[serde(default = "default_p")]
        p: f64,
        #[serde(default)]
        seed: u64,
    },
    Cad {
        #[serde(default = "default_alpha")]
        alpha: f64,
        /// Segment removed to form the context-free prompt.
        #[serde(default = "default_cad_drop")]
        drop: SegmentKind,
    },
    Dola {
        #[serde(default)]
        contrast_layer: usize,
        #[serde(default = "default_beta")]
        plausibility_beta: f64,
    },
    Agd(AgdConfig),
}

fn default_p() -> f64 {
    0.95
}
fn default_alpha() -> f64 {
    1.0
}
fn default_cad_drop() -> SegmentKind {
    SegmentKind::Instruction
}
fn default_beta() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    #[serde(flatten)]
    pub method: DecodeMethod,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub stop_tokens: BTreeSet<TokenId>,
    #[serde(skip)]
    pub exec: Exec,
}

impl DecodeConfig {
    pub fn new(method: DecodeMethod, max_new_tokens: usize) -> Self {
        Self {
            method,
            max_new_tokens,
            stop_tokens: BTreeSet::new(),
            exec: Exec::default(),
        }
    }

    pub fn with_stop(mut self, tokens: impl IntoIterator<Item = TokenId>) -> Self {
        self.stop_tokens.extend(tokens);
        self
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDecodeConfig(m));
        match &self.method {
            DecodeMethod::Greedy => {}
            DecodeMethod::Nucleus { p, .. } => {
                if !(*p > 0.0 && *p <= 1.0) {
                    return bad(format!("nucleus p {p} outside (0, 1]"));
                }
            }
            DecodeMethod::Cad { alpha, .. } => {
                if !(*alpha >= 0.0) {
                    return bad(format!("alpha {alpha} < 0"));
                }
            }
            DecodeMethod::Dola {
                contrast_layer,
                plausibility_beta,
            } => {
                if *contrast_layer >= n_layers {
                    return bad(format!(
                        "contrast layer {contrast_layer} must be < n_layers {n_layers}"
                    ));
                }
                if !(0.0..=1.0).contains(plausibility_beta) {
                    return bad(format!("beta {plausibility_beta} outside [0, 1]"));
                }
            }
            DecodeMethod::Agd(a) => {
                if a.k == 0 {
                    return bad("k must be >= 1".into());
                }
                if !(0.0..1.0).contains(&a.pi_min) {
                    return bad(format!("pi_min {} outside [0, 1)", a.pi_min));
                }
                if let Some(t) = a.tau {
                    if !(t >= 0.0) {
                        return bad(format!("tau {t} must be >= 0"));
                    }
                }
                a.lrp.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChosenReason {
    Greedy,
    AttributionArgmax,
    Sampled,
    Contrast,
}

/// Full decision record of one decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// Entropy of the model's next-token distribution, in nats.
    pub entropy: f64,
    /// Whether the attribution pass ran.
    pub gated: bool,
    pub candidates: CandidateSet,
    pub scores: Vec<Scored>,
    pub chosen: TokenId,
    pub chosen_reason: ChosenReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub gated_fraction: f64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub output: Vec<TokenId>,
    pub text: String,
    pub steps: Vec<StepTrace>,
    pub stats: DecodeStats,
}

impl DecodeResult {
    pub fn gated_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.gated).count()
    }
}

/// Autoregressive generation from `prompt`.
pub fn decode<T: Scalar>(
    model: &Model<T>,
    prompt: &Prompt,
    config: &DecodeConfig,
) -> Result<DecodeResult> {
    let max = model.config.max_seq_len;
    if prompt.is_empty() || prompt.len() + config.max_new_tokens > max {
        return Err(Error::ContextOverflow {
            prompt: prompt.len(),
            new: config.max_new_tokens,
            max,
        });
    }
    config.validate(model.config.n_layers)?;
    let mut resolved;
    let config = if let DecodeMethod::Agd(a) = &config.method {
        let roi = a.roi.resolve(prompt)?;
        roi.validate(prompt.len(), &model.config)?;
        resolved = config.clone();
        if let DecodeMethod::Agd(a) = &mut resolved.method {
            a.roi = roi;
        }
        &resolved
    } else {
        config
    };
    let context_free = match &config.method {
        DecodeMethod::Cad { drop, .. } => Some(prompt.without(*drop)?),
        _ => None,
    };
    let mut rng = match &config.method {
        DecodeMethod::Nucleus { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        _ => None,
    };

    let started = Instant::now();
    let mut tokens = prompt.tokens.clone();
    let mut output = Vec::new();
    let mut steps = Vec::new();
    for step in 0..config.max_new_tokens {
        let (logits, cache) = forward(model, &tokens)?;
        let probs = softmax(&logits);
        let (chosen, mut trace) = match &config.method {
            DecodeMethod::Greedy => {
                let chosen = argmax(&probs);
                simple_trace(&probs, &logits, chosen, ChosenReason::Greedy)?
            }
            DecodeMethod::Nucleus { p, .. } => {
                let support = nucleus_filter(&probs, *p)?;
                let u: f64 = rng.as_mut().expect("seeded for nucleus").gen();
                let chosen = sample_support(&support, u);
                simple_trace(&probs, &logits, chosen, ChosenReason::Sampled)?
            }
            DecodeMethod::Cad { alpha, .. } => {
                let mut cf = context_free.clone().expect("built for cad").tokens;
                cf.extend_from_slice(&output);
                let (cf_logits, _) = forward(model, &cf)?;
                let adjusted = cad_logits(&logits, &cf_logits, *alpha)?;
                let chosen = argmax(&softmax(&adjusted));
                simple_trace(&probs, &logits, chosen, ChosenReason::Contrast)?
            }
            DecodeMethod::Dola {
                contrast_layer,
                plausibility_beta,
            } => {
                let early = early_exit_logits(model, &cache, *contrast_layer)?;
                let scores = dola_scores(&log_softmax(&logits), &log_softmax(&early), *plausibility_beta)?;
                let chosen = argmax_with_tiebreak(&scores, &probs);
                simple_trace(&probs, &logits, chosen, ChosenReason::Contrast)?
            }
            DecodeMethod::Agd(a) => match a.tau {
                Some(_) => agd::gated_from_cache(model, &cache, &probs, a, config.exec)?,
                None => {
                    let entropy = shannon_entropy(&probs)?;
                    agd::agd_from_cache(model, &cache, &probs, entropy, a, config.exec)?
                }
            },
        };
        trace.step = step;
        tokens.push(chosen);
        output.push(chosen);
        steps.push(trace);
        if chosen == Tokenizer::EOS || config.stop_tokens.contains(&chosen) {
            break;
        }
    }
    let gated = steps.iter().filter(|s| s.gated).count();
    Ok(DecodeResult {
        text: Tokenizer.decode(&output),
        stats: DecodeStats {
            gated_fraction: if steps.is_empty() {
                0.0
            } else {
                gated as f64 / steps.len() as f64
            },
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        },
        output,
        steps,
    })
}

fn simple_trace<T: Scalar>(
    probs: &[T],
    logits: &[T],
    chosen: TokenId,
    reason: ChosenReason,
) -> Result<(TokenId, StepTrace)> {
    let entropy = shannon_entropy(probs)?;
    let mut candidates = CandidateSet {
        entries: vec![Candidate {
            token: chosen,
            probability: probs[chosen as usize].as_f64(),
            logit: None,
        }],
        fallback: false,
    };
    candidates.attach_logits(logits);
    Ok((
        chosen,
        StepTrace {
            step: 0,
            entropy,
            gated: false,
            candidates,
            scores: Vec::new(),
            chosen,
            chosen_reason: reason,
        },
    ))
}
