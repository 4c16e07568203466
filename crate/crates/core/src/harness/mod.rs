//! Datasets, metrics, toy tasks, training, and evaluation reports.

pub mod constraints;
pub mod data;
pub mod metrics;
pub mod toy;
pub mod train;

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use constraints::{check_constraint, ConstraintSpec};
pub use data::{qa_prompt, read_jsonl, write_jsonl, IfSample, QaFormat, QaSample, SYSTEM_PREAMBLE};
pub use metrics::{answer_recall, calibrate_entropy_threshold, nearest_rank, pla_ila, Calibration};
pub use toy::{generate_toy_task, ToyCorpus, ToyTaskKind, ToyTaskSpec, TrainSequence};
pub use train::{mean_loss, sequence_loss_grad, train_in_place, train_toy_model, TrainConfig, TrainLog};

use crate::decoding::{decode, DecodeConfig, DecodeResult, StepTrace};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::Model;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintVerdict {
    #[serde(rename = "type")]
    pub kind: String,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleVerdict {
    pub id: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<ConstraintVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    pub gated_steps: usize,
    pub steps: usize,
    /// Set when decoding failed; such samples are excluded from the metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SampleVerdict {
    pub fn all_satisfied(&self) -> bool {
        self.error.is_none() && self.constraints.iter().all(|c| c.satisfied)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub verdicts: Vec<SampleVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pla: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ila: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    /// Fraction of all decoding steps that ran an attribution pass.
    pub gated_fraction: f64,
    pub n_failed: usize,
    pub config: serde_json::Value,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

impl EvalReport {
    /// Ids of samples whose constraints all hold.
    pub fn passing_ids(&self) -> Vec<&str> {
        self.verdicts
            .iter()
            .filter(|v| !v.constraints.is_empty() && v.all_satisfied())
            .map(|v| v.id.as_str())
            .collect()
    }
}

pub fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn gated_fraction(verdicts: &[SampleVerdict]) -> f64 {
    let (g, n) = verdicts
        .iter()
        .fold((0, 0), |(g, n), v| (g + v.gated_steps, n + v.steps));
    if n == 0 {
        0.0
    } else {
        g as f64 / n as f64
    }
}

fn base_verdict(id: &str, result: &Result<DecodeResult>) -> SampleVerdict {
    match result {
        Ok(r) => SampleVerdict {
            id: id.to_string(),
            output: r.text.clone(),
            constraints: Vec::new(),
            recall: None,
            gated_steps: r.gated_steps(),
            steps: r.steps.len(),
            error: None,
        },
        Err(e) => SampleVerdict {
            id: id.to_string(),
            output: String::new(),
            constraints: Vec::new(),
            recall: None,
            gated_steps: 0,
            steps: 0,
            error: Some(e.to_string()),
        },
    }
}

/// PLA/ILA over `samples`; `decode_one` produces each output.
pub fn eval_instruction_following<F>(
    samples: &[IfSample],
    decode_one: F,
    config: serde_json::Value,
    exec: Exec,
) -> Result<EvalReport>
where
    F: Fn(&IfSample) -> Result<DecodeResult> + Sync + Send,
{
    if samples.is_empty() {
        return Err(Error::Data("no samples".into()));
    }
    samples.iter().try_for_each(IfSample::validate)?;
    let started = unix_ms();
    let verdicts: Vec<SampleVerdict> = exec.map(samples, |s| {
        let result = decode_one(s);
        let mut v = base_verdict(&s.id, &result);
        if v.error.is_none() {
            v.constraints = s
                .constraints
                .iter()
                .map(|c| ConstraintVerdict {
                    kind: c.name().to_string(),
                    satisfied: check_constraint(&v.output, c),
                })
                .collect();
        }
        v
    });
    let outcomes: Vec<Vec<bool>> = verdicts
        .iter()
        .filter(|v| v.error.is_none())
        .map(|v| v.constraints.iter().map(|c| c.satisfied).collect())
        .collect();
    let n_failed = samples.len() - outcomes.len();
    let (pla, ila) = if outcomes.is_empty() {
        (None, None)
    } else {
        let (p, i) = pla_ila(&outcomes)?;
        (Some(p), Some(i))
    };
    Ok(EvalReport {
        gated_fraction: gated_fraction(&verdicts),
        verdicts,
        pla,
        ila,
        recall: None,
        n_failed,
        config,
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
    })
}

/// Mean answer recall over `samples`.
pub fn eval_qa<F>(
    samples: &[QaSample],
    decode_one: F,
    config: serde_json::Value,
    exec: Exec,
) -> Result<EvalReport>
where
    F: Fn(&QaSample) -> Result<DecodeResult> + Sync + Send,
{
    if samples.is_empty() {
        return Err(Error::Data("no samples".into()));
    }
    samples.iter().try_for_each(QaSample::validate)?;
    let started = unix_ms();
    let verdicts: Vec<SampleVerdict> = exec.map(samples, |s| {
        let result = decode_one(s);
        let mut v = base_verdict(&s.id, &result);
        if v.error.is_none() {
            v.recall = Some(answer_recall(&v.output, &s.answers));
        }
        v
    });
    let recalls: Vec<f64> = verdicts.iter().filter_map(|v| v.recall).collect();
    let n_failed = samples.len() - recalls.len();
    Ok(EvalReport {
        gated_fraction: gated_fraction(&verdicts),
        recall: (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64),
        verdicts,
        pla: None,
        ila: None,
        n_failed,
        config,
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
    })
}

/// Decodes instruction samples with `model`; segment ROIs resolve per prompt.
pub fn eval_instruction_following_model<T: Scalar>(
    model: &Model<T>,
    samples: &[IfSample],
    config: &DecodeConfig,
    exec: Exec,
) -> Result<(EvalReport, Vec<Vec<StepTrace>>)> {
    let inner = inner_config(config, exec);
    let traces = std::sync::Mutex::new(vec![Vec::new(); samples.len()]);
    let index = |id: &str| samples.iter().position(|s| s.id == id);
    let report = eval_instruction_following(
        samples,
        |s| {
            let r = decode(model, &s.prompt(), &inner)?;
            if let Some(i) = index(&s.id) {
                traces.lock().expect("trace lock")[i] = r.steps.clone();
            }
            Ok(r)
        },
        serde_json::to_value(config).expect("serializable"),
        exec,
    )?;
    Ok((report, traces.into_inner().expect("trace lock")))
}

/// Decodes QA samples laid out with `format`.
pub fn eval_qa_model<T: Scalar>(
    model: &Model<T>,
    samples: &[QaSample],
    format: QaFormat,
    config: &DecodeConfig,
    exec: Exec,
) -> Result<(EvalReport, Vec<Vec<StepTrace>>)> {
    let inner = inner_config(config, exec);
    let traces = std::sync::Mutex::new(vec![Vec::new(); samples.len()]);
    let index = |id: &str| samples.iter().position(|s| s.id == id);
    let report = eval_qa(
        samples,
        |s| {
            let prompt = qa_prompt(&s.question, s.context.as_deref(), format);
            let r = decode(model, &prompt, &inner)?;
            if let Some(i) = index(&s.id) {
                traces.lock().expect("trace lock")[i] = r.steps.clone();
            }
            Ok(r)
        },
        serde_json::to_value(config).expect("serializable"),
        exec,
    )?;
    Ok((report, traces.into_inner().expect("trace lock")))
}

/// Samples already run in parallel; candidates inside one sample then run
/// sequentially.
fn inner_config(config: &DecodeConfig, exec: Exec) -> DecodeConfig {
    let mut inner = config.clone();
    if exec == Exec::Parallel {
        inner.exec = Exec::Sequential;
    }
    inner
}
