//! Verifiable output constraints.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConstraintSpec {
    KeywordsInclude { keywords: Vec<String> },
    KeywordsExclude { keywords: Vec<String> },
    /// At least `n` whitespace-delimited words.
    MinWords { n: usize },
    /// At most `n` whitespace-delimited words.
    MaxWords { n: usize },
    NoCommas,
    /// At least `n` bracketed placeholders such as `[name]`.
    PlaceholderCountMin { n: usize },
    /// The whole output, trimmed and optionally fenced, parses as JSON.
    JsonFormat,
}

impl ConstraintSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::KeywordsInclude { keywords } | Self::KeywordsExclude { keywords } => {
                if keywords.is_empty() {
                    return Err(Error::Data("keyword constraint without keywords".into()));
                }
                for k in keywords {
                    if words_of(k).len() != 1 {
                        return Err(Error::Data(format!("keyword {k:?} is not a single word")));
                    }
                }
                Ok(())
            }
            Self::MinWords { n } | Self::PlaceholderCountMin { n } if *n == 0 => {
                Err(Error::Data("count constraint needs n >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::KeywordsInclude { .. } => "keywords_include",
            Self::KeywordsExclude { .. } => "keywords_exclude",
            Self::MinWords { .. } => "min_words",
            Self::MaxWords { .. } => "max_words",
            Self::NoCommas => "no_commas",
            Self::PlaceholderCountMin { .. } => "placeholder_count_min",
            Self::JsonFormat => "json_format",
        }
    }
}

/// Lowercased maximal runs of alphanumeric characters.
pub fn words_of(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn whitespace_word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn placeholder_count(text: &str) -> usize {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[[^\[\]]+\]").expect("static regex"))
        .find_iter(text)
        .count()
}

fn contains_word(words: &[String], keyword: &str) -> bool {
    let k = keyword.to_lowercase();
    words.contains(&k)
}

fn is_json(text: &str) -> bool {
    let mut t = text.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let rest = rest.strip_prefix("json").unwrap_or(rest);
        if let Some(inner) = rest.trim_end().strip_suffix("```") {
            t = inner.trim();
        }
    }
    serde_json::from_str::<serde_json::Value>(t).is_ok()
}

pub fn check_constraint(output: &str, spec: &ConstraintSpec) -> bool {
    match spec {
        ConstraintSpec::KeywordsInclude { keywords } => {
            let words = words_of(output);
            keywords.iter().all(|k| contains_word(&words, k))
        }
        ConstraintSpec::KeywordsExclude { keywords } => {
            let words = words_of(output);
            !keywords.iter().any(|k| contains_word(&words, k))
        }
        ConstraintSpec::MinWords { n } => whitespace_word_count(output) >= *n,
        ConstraintSpec::MaxWords { n } => whitespace_word_count(output) <= *n,
        ConstraintSpec::NoCommas => !output.contains(','),
        ConstraintSpec::PlaceholderCountMin { n } => placeholder_count(output) >= *n,
        ConstraintSpec::JsonFormat => is_json(output),
    }
}
