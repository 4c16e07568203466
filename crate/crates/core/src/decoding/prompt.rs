//! Prompts with named segments and regions of interest over them.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tokenizer::{TokenId, Tokenizer};

/// Which components a guided decoder rewards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiSpec {
    /// Input token positions (union of the ranges).
    InputSpan(Vec<Range<usize>>),
    /// `(layer, head)` pairs.
    HeadSet(Vec<(usize, usize)>),
    AllInputs,
    /// A named prompt segment, resolved to its span per prompt.
    Segment(SegmentKind),
}

impl RoiSpec {
    /// Replaces a segment reference by the prompt's span for it.
    pub fn resolve(&self, prompt: &Prompt) -> Result<RoiSpec> {
        match self {
            RoiSpec::Segment(kind) => prompt.roi(*kind),
            other => Ok(other.clone()),
        }
    }

    pub fn validate(&self, prompt_len: usize, config: &ModelConfig) -> Result<()> {
        match self {
            RoiSpec::AllInputs | RoiSpec::Segment(_) => Ok(()),
            RoiSpec::InputSpan(ranges) => {
                if ranges.is_empty() {
                    return Err(Error::InvalidRoi("no spans".into()));
                }
                for r in ranges {
                    if r.start >= r.end || r.end > prompt_len {
                        return Err(Error::InvalidRoi(format!(
                            "span {}..{} not a non-empty range within prompt of {prompt_len}",
                            r.start, r.end
                        )));
                    }
                }
                Ok(())
            }
            RoiSpec::HeadSet(heads) => {
                if heads.is_empty() {
                    return Err(Error::InvalidRoi("empty head set".into()));
                }
                for &(l, h) in heads {
                    if l >= config.n_layers || h >= config.n_heads {
                        return Err(Error::InvalidRoi(format!(
                            "head ({l}, {h}) outside {}x{}",
                            config.n_layers, config.n_heads
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Instruction,
    Task,
    Context,
}

/// Token-position ranges of the named prompt parts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segments {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<Range<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Range<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<Range<usize>>,
}

impl Segments {
    pub fn get(&self, kind: SegmentKind) -> Option<Range<usize>> {
        match kind {
            SegmentKind::Instruction => self.instruction.clone(),
            SegmentKind::Task => self.task.clone(),
            SegmentKind::Context => self.context.clone(),
        }
    }
}

/// Encoded prompt: `BOS` followed by the UTF-8 bytes of the text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<TokenId>,
    pub segments: Segments,
}

impl Prompt {
    pub fn from_tokens(tokens: Vec<TokenId>) -> Self {
        Self {
            tokens,
            segments: Segments::default(),
        }
    }

    pub fn from_text(text: &str) -> Self {
        let mut tokens = vec![Tokenizer::BOS];
        tokens.extend(Tokenizer.encode(text));
        Self::from_tokens(tokens)
    }

    /// Encodes `text` and maps character-offset segments `[start, end)` onto
    /// token positions.
    pub fn with_char_segments(text: &str, segments: &CharSegments) -> Result<Self> {
        let mut prompt = Self::from_text(text);
        let n_chars = text.chars().count();
        let byte_at = |c: usize| -> Result<usize> {
            if c > n_chars {
                return Err(Error::Data(format!(
                    "segment offset {c} beyond prompt of {n_chars} characters"
                )));
            }
            Ok(text.char_indices().nth(c).map(|(b, _)| b).unwrap_or(text.len()))
        };
        let map = |span: Option<[usize; 2]>| -> Result<Option<Range<usize>>> {
            match span {
                None => Ok(None),
                Some([s, e]) => {
                    if s >= e {
                        return Err(Error::Data(format!("empty segment [{s}, {e})")));
                    }
                    Ok(Some(byte_at(s)? + 1..byte_at(e)? + 1))
                }
            }
        };
        prompt.segments = Segments {
            instruction: map(segments.instruction)?,
            task: map(segments.task)?,
            context: map(segments.context)?,
        };
        Ok(prompt)
    }

    /// Builds a prompt from consecutive text parts, recording the token span
    /// of each tagged part.
    pub fn from_parts(parts: &[(Option<SegmentKind>, &str)]) -> Self {
        let mut tokens = vec![Tokenizer::BOS];
        let mut segments = Segments::default();
        for (kind, text) in parts {
            let start = tokens.len();
            tokens.extend(Tokenizer.encode(text));
            let span = Some(start..tokens.len());
            match kind {
                Some(SegmentKind::Instruction) => segments.instruction = span,
                Some(SegmentKind::Task) => segments.task = span,
                Some(SegmentKind::Context) => segments.context = span,
                None => {}
            }
        }
        Self { tokens, segments }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Prompt with one segment deleted. Byte-level tokens make this identical
    /// to re-encoding the text without that segment.
    pub fn without(&self, kind: SegmentKind) -> Result<Prompt> {
        let span = self.segments.get(kind).ok_or_else(|| {
            Error::InvalidDecodeConfig(format!("prompt has no {kind:?} segment"))
        })?;
        let mut tokens = self.tokens[..span.start].to_vec();
        tokens.extend_from_slice(&self.tokens[span.end..]);
        Ok(Prompt::from_tokens(tokens))
    }

    /// ROI covering one segment.
    pub fn roi(&self, kind: SegmentKind) -> Result<RoiSpec> {
        self.segments
            .get(kind)
            .map(|r| RoiSpec::InputSpan(vec![r]))
            .ok_or_else(|| Error::InvalidRoi(format!("prompt has no {kind:?} segment")))
    }
}

/// Character-offset segments as given in a decode request file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharSegments {
    #[serde(default)]
    pub instruction: Option<[usize; 2]>,
    #[serde(default)]
    pub task: Option<[usize; 2]>,
    #[serde(default)]
    pub context: Option<[usize; 2]>,
}
