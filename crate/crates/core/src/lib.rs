//! Attribution-guided decoding laboratory.
//!
//! A small pre-layernorm decoder-only transformer with a caching forward
//! pass, Input×Gradient and epsilon-LRP attribution, an attribution-guided
//! decoder (plain and entropy-gated) next to the usual baselines, attention
//! head extraction from counterfactual QA, and an evaluation harness.
//!
//! ```text
//! tokens ─► forward ─► ActivationCache ─► attribute(candidate) ─► AttributionMap
//!                            │                                        │
//!                            └── probs ─► select_candidates ─► roi_score ─► argmax
//! ```

pub mod attribution;
pub mod decoding;
pub mod error;
pub mod exec;
pub mod format;
pub mod forward;
pub mod grad;
pub mod harness;
pub mod heads;
pub mod judge;
pub mod model;
pub mod scalar;
pub mod tokenizer;

pub use attribution::{
    attribute, head_relevance, roi_score, AttentionRule, AttributionMap, AttributionMethod,
    ComponentId, Heatmap, LrpConfig,
};
pub use decoding::{
    decode, select_candidates, shannon_entropy, AgdConfig, CandidateSet, DecodeConfig,
    DecodeMethod, DecodeResult, Prompt, RoiSpec, SegmentKind, StepTrace,
};
pub use error::{Error, Result};
pub use exec::Exec;
pub use forward::{forward, ActivationCache};
pub use grad::input_gradient;
pub use model::{Activation, Model, ModelConfig};
pub use scalar::{Mat, Scalar};
pub use tokenizer::{TokenId, Tokenizer};
