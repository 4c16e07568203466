//! Sample types, prompt layouts, and JSON-lines I/O.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::constraints::ConstraintSpec;
use crate::decoding::{Prompt, SegmentKind};
use crate::error::{Error, Result};

pub const SYSTEM_PREAMBLE: &str = "You are a helpful assistant.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IfSample {
    pub id: String,
    pub instruction: String,
    pub task: String,
    pub constraints: Vec<ConstraintSpec>,
    /// Target output used for training toy models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl IfSample {
    pub fn validate(&self) -> Result<()> {
        if self.instruction.is_empty() || self.task.is_empty() {
            return Err(Error::Data(format!("sample {}: empty instruction or task", self.id)));
        }
        if self.constraints.is_empty() {
            return Err(Error::Data(format!("sample {}: no constraints", self.id)));
        }
        self.constraints.iter().try_for_each(ConstraintSpec::validate)
    }

    /// `instruction \n task \n`, with instruction and task segments marked.
    pub fn prompt(&self) -> Prompt {
        Prompt::from_parts(&[
            (Some(SegmentKind::Instruction), &self.instruction),
            (None, "\n"),
            (Some(SegmentKind::Task), &self.task),
            (None, "\n"),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaSample {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub answers: Vec<String>,
}

impl QaSample {
    pub fn validate(&self) -> Result<()> {
        if self.answers.is_empty() {
            return Err(Error::Data(format!("sample {}: no answers", self.id)));
        }
        Ok(())
    }
}

/// Prompt layout for question answering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaFormat {
    /// System preamble line, then the question (closed book) or the
    /// context-plus-question template (open book).
    #[default]
    Chat,
    /// `context;question?` (open book) or `question?` (closed book), the
    /// layout of the generated toy tasks.
    Compact,
}

pub fn qa_prompt(question: &str, context: Option<&str>, format: QaFormat) -> Prompt {
    match (format, context) {
        (QaFormat::Chat, None) => Prompt::from_parts(&[
            (Some(SegmentKind::Instruction), SYSTEM_PREAMBLE),
            (None, "\n"),
            (Some(SegmentKind::Task), question),
            (None, "\n"),
        ]),
        (QaFormat::Chat, Some(ctx)) => Prompt::from_parts(&[
            (Some(SegmentKind::Instruction), SYSTEM_PREAMBLE),
            (None, "\n"),
            (Some(SegmentKind::Context), ctx),
            (None, " \n\nBased on this text, answer this question:\nQ: "),
            (Some(SegmentKind::Task), question),
            (None, "\nA:"),
        ]),
        (QaFormat::Compact, None) => {
            Prompt::from_parts(&[(Some(SegmentKind::Task), question), (None, "?")])
        }
        (QaFormat::Compact, Some(ctx)) => Prompt::from_parts(&[
            (Some(SegmentKind::Context), ctx),
            (None, ";"),
            (Some(SegmentKind::Task), question),
            (None, "?"),
        ]),
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    fs::write(path, to_jsonl(items)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Tokenizer;

    #[test]
    fn chat_template_text() {
        let p = qa_prompt("Who?", Some("Ctx."), QaFormat::Chat);
        let text = Tokenizer.decode(&p.tokens);
        assert_eq!(
            text,
            "You are a helpful assistant.\nCtx. \n\nBased on this text, answer this question:\nQ: Who?\nA:"
        );
        let ctx = p.segments.get(SegmentKind::Context).unwrap();
        assert_eq!(Tokenizer.decode(&p.tokens[ctx]), "Ctx.");
        let cb = qa_prompt("Who?", None, QaFormat::Chat);
        assert_eq!(Tokenizer.decode(&cb.tokens), "You are a helpful assistant.\nWho?\n");
    }

    #[test]
    fn compact_and_if_prompts() {
        let p = qa_prompt("A", Some("A=xyz B=qrs"), QaFormat::Compact);
        assert_eq!(Tokenizer.decode(&p.tokens), "A=xyz B=qrs;A?");
        assert_eq!(p.segments.get(SegmentKind::Context), Some(1..12));
        let s = IfSample {
            id: "1".into(),
            instruction: "include: sun".into(),
            task: "write".into(),
            constraints: vec![ConstraintSpec::NoCommas],
            reference: None,
        };
        s.validate().unwrap();
        assert_eq!(Tokenizer.decode(&s.prompt().tokens), "include: sun\nwrite\n");
        let bad = IfSample {
            constraints: vec![],
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        let items = vec![QaSample {
            id: "q".into(),
            question: "x".into(),
            context: None,
            answers: vec!["y".into()],
        }];
        write_jsonl(&path, &items).unwrap();
        assert_eq!(read_jsonl::<QaSample>(&path).unwrap(), items);
        std::fs::write(&path, "{bad").unwrap();
        assert!(matches!(read_jsonl::<QaSample>(&path), Err(Error::Data(_))));
    }
}
