//! Two-stage quality scoring against a chat-completion endpoint: the judge
//! first writes up to five yes/no questions about a task, then answers them
//! for a response.
//!
//! Templates and parsers are always available; the HTTP transport needs the
//! `judge` feature.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const QUESTION_TEMPLATE: &str = "The following is a prompt that is used to evaluate the generations from a large language model. We do not know how to evaluate the quality of model answers for this prompt. Can you come up with 5 or less questions that can break down the quality to  simpler evaluation tasks that we can then ask about the model answer? Each question should have a simple yes, no answer.
Prompt: {{ prompt without instruction }}
List all sub questions in the following format:
Output:
1: Question: <question>
2: Question: <question>
...
N: Question: <question>";

pub const EVALUATION_TEMPLATE: &str = "We need to evaluate the quality of generations from a large language model. You will be given an input prompt, the response from a language model and a set of questions assessing the quality of the response. You need to review the response against the input prompt and provide an answer to each question as either 'Yes', 'No' or 'Not Applicable' if the question does not apply to the case along with a reason for your answer.
Prompt: {{ prompt without instruction }}
Response: {{ response }}
Questions: {{ up to 5 evaluation questions }}
List your answers in the following format:
Output:
1. Question: <question>. Reason: <reason>: Answer: <answer>
2. Question: <question>. Reason: <reason>: Answer: <answer>
...
N. Question: <question>. Reason: <reason>: Answer: <answer>";

const TASK_SLOT: &str = "{{ prompt without instruction }}";
const RESPONSE_SLOT: &str = "{{ response }}";
const QUESTIONS_SLOT: &str = "{{ up to 5 evaluation questions }}";

pub fn question_prompt(task: &str) -> String {
    QUESTION_TEMPLATE.replace(TASK_SLOT, task)
}

/// Questions are listed one per line, numbered.
pub fn evaluation_prompt(task: &str, response: &str, questions: &[String]) -> String {
    let listed = questions
        .iter()
        .enumerate()
        .map(|(i, q)| format!("{}. {q}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    // fill the task first: a response may itself contain slot text
    EVALUATION_TEMPLATE
        .replacen(TASK_SLOT, task, 1)
        .replacen(QUESTIONS_SLOT, &listed, 1)
        .replacen(RESPONSE_SLOT, response, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub question: String,
    pub reason: String,
    pub answer: Answer,
}

pub fn parse_questions(raw: &str) -> Result<Vec<String>> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"(?m)^\s*\d+\s*[:.]\s*Question:\s*(.+?)\s*$").expect("static regex")
    });
    let questions: Vec<String> = re
        .captures_iter(raw)
        .map(|c| c[1].to_string())
        .filter(|q| q != "<question>")
        .collect();
    match questions.len() {
        0 => Err(Error::JudgeParse {
            reason: "no numbered questions".into(),
            raw: raw.to_string(),
        }),
        n if n > 5 => Err(Error::JudgeParse {
            reason: format!("{n} questions, at most 5 allowed"),
            raw: raw.to_string(),
        }),
        _ => Ok(questions),
    }
}

fn parse_answer(text: &str) -> Option<Answer> {
    let t = text
        .trim()
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_ascii_lowercase();
    match t.as_str() {
        "yes" => Some(Answer::Yes),
        "no" => Some(Answer::No),
        "not applicable" | "n/a" | "na" => Some(Answer::NotApplicable),
        _ => None,
    }
}

pub fn parse_verdicts(raw: &str) -> Result<Vec<QualityVerdict>> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"(?m)^\s*\d+\s*[.:]\s*Question:\s*(.*?)\.?\s*Reason:\s*(.*?)\s*:?\s*Answer:\s*(.+?)\s*$")
            .expect("static regex")
    });
    let mut out = Vec::new();
    for c in re.captures_iter(raw) {
        let answer = parse_answer(&c[3]).ok_or_else(|| Error::JudgeParse {
            reason: format!("unknown answer {:?}", &c[3]),
            raw: raw.to_string(),
        })?;
        out.push(QualityVerdict {
            question: c[1].to_string(),
            reason: c[2].to_string(),
            answer,
        });
    }
    if out.is_empty() {
        return Err(Error::JudgeParse {
            reason: "no numbered verdicts".into(),
            raw: raw.to_string(),
        });
    }
    Ok(out)
}

/// Share of yes among yes and no answers.
pub fn quality_score(verdicts: &[QualityVerdict]) -> Result<f64> {
    let yes = verdicts.iter().filter(|v| v.answer == Answer::Yes).count();
    let no = verdicts.iter().filter(|v| v.answer == Answer::No).count();
    if yes + no == 0 {
        return Err(Error::EmptyVerdicts);
    }
    Ok(yes as f64 / (yes + no) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token; unset means no auth.
    #[serde(default = "default_token_env")]
    pub token_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Delay before the first retry; doubles each time.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_token_env() -> String {
    "AGD_JUDGE_TOKEN".into()
}
fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}

impl JudgeConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            token_env: default_token_env(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Data("judge timeout must be > 0".into()));
        }
        Ok(())
    }
}

/// One judged sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRecord {
    pub id: String,
    pub questions: Vec<String>,
    pub verdicts: Vec<QualityVerdict>,
    pub score: Option<f64>,
}

#[cfg(feature = "judge")]
pub use client::{generate_quality_questions, judge_response, Judge};

#[cfg(feature = "judge")]
mod client {
    use std::thread::sleep;
    use std::time::Duration;

    use serde_json::{json, Value};

    use super::*;

    pub struct Judge {
        config: JudgeConfig,
        http: reqwest::blocking::Client,
        token: Option<String>,
    }

    impl Judge {
        pub fn new(config: JudgeConfig) -> Result<Self> {
            config.validate()?;
            let http = reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs_f64(config.timeout_secs))
                .build()
                .map_err(|e| Error::JudgeTransport(e.to_string()))?;
            let token = std::env::var(&config.token_env).ok();
            Ok(Self {
                config,
                http,
                token,
            })
        }

        /// Sends one user message and returns the assistant's text.
        pub fn complete(&self, prompt: &str) -> Result<String> {
            let body = json!({
                "model": self.config.model,
                "messages": [{"role": "user", "content": prompt}],
            });
            let mut delay = Duration::from_millis(self.config.backoff_ms);
            let mut last = String::new();
            for attempt in 0..=self.config.max_retries {
                if attempt > 0 {
                    sleep(delay);
                    delay *= 2;
                }
                let mut req = self.http.post(&self.config.endpoint).json(&body);
                if let Some(t) = &self.token {
                    req = req.bearer_auth(t);
                }
                match req.send() {
                    Ok(resp) if resp.status().is_success() => {
                        let text = resp.text().map_err(|e| Error::JudgeTransport(e.to_string()))?;
                        return extract_content(&text);
                    }
                    Ok(resp) => {
                        let status = resp.status();
                        last = format!("HTTP {status}");
                        if status.is_client_error() && status.as_u16() != 429 {
                            break;
                        }
                    }
                    Err(e) => last = e.to_string(),
                }
            }
            Err(Error::JudgeTransport(format!(
                "{} after {} attempts",
                last,
                self.config.max_retries + 1
            )))
        }
    }

    fn extract_content(text: &str) -> Result<String> {
        let parse_err = |reason: &str| Error::JudgeParse {
            reason: reason.to_string(),
            raw: text.to_string(),
        };
        let v: Value = serde_json::from_str(text).map_err(|_| parse_err("response is not JSON"))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| parse_err("missing choices[0].message.content"))
    }

    pub fn generate_quality_questions(judge: &Judge, task: &str) -> Result<Vec<String>> {
        parse_questions(&judge.complete(&question_prompt(task))?)
    }

    /// Questions, verdicts, and score for one response.
    pub fn judge_response(judge: &Judge, id: &str, task: &str, response: &str) -> Result<JudgeRecord> {
        let questions = generate_quality_questions(judge, task)?;
        let verdicts = parse_verdicts(&judge.complete(&evaluation_prompt(task, response, &questions))?)?;
        Ok(JudgeRecord {
            id: id.to_string(),
            score: quality_score(&verdicts).ok(),
            questions,
            verdicts,
        })
    }
}
