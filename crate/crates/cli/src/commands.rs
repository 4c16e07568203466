use std::fs;
use std::path::{Path, PathBuf};

use agd_core::attribution::{attribute, AttentionRule, AttributionMethod, Heatmap, LrpConfig};
use agd_core::decoding::{
    argmax, decode, AgdConfig, CharSegments, DecodeConfig, DecodeMethod, Prompt, RoiSpec,
    SegmentKind,
};
use agd_core::format::{load_model, save_model};
use agd_core::harness::{
    self, calibrate_entropy_threshold, generate_toy_task, mean_loss, qa_prompt, read_jsonl,
    train_toy_model, write_jsonl, EvalReport, IfSample, QaFormat, QaSample, ToyCorpus,
    ToyTaskKind, ToyTaskSpec, TrainConfig, TrainSequence,
};
use agd_core::heads::{
    extract_head_sets, head_difference_scores, CounterfactualSample, HeadScoreConfig, HeadSets,
    TargetMode,
};
use agd_core::judge::{judge_response, Judge, JudgeConfig};
use agd_core::{forward, Exec, Model, ModelConfig, Scalar, TokenId, Tokenizer};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::args::*;
use crate::UsageError;

/// Files touched by a run and the seed it used.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
}

macro_rules! with_model {
    ($args:expr, $m:ident => $body:expr) => {{
        let base = load_model(&$args.model)?;
        match $args.precision {
            Precision::F32 => {
                let $m = &base;
                $body
            }
            Precision::F64 => {
                let $m = &base.cast::<f64>();
                $body
            }
        }
    }};
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| agd_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| agd_core::Error::Data(format!("{}: {e}", path.display())).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| agd_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Writes to `path`, or to standard output when absent.
fn emit<T: Serialize>(path: Option<&Path>, value: &T, outcome: &mut Outcome) -> Result<()> {
    match path {
        Some(p) => {
            write_json(p, value)?;
            outcome.outputs.push(p.to_path_buf());
        }
        None => println!("{}", serde_json::to_string(value)?),
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct Request {
    prompt: String,
    #[serde(default)]
    segments: CharSegments,
}

fn load_request(path: &Path) -> Result<Prompt> {
    let req: Request = read_json(path)?;
    Ok(Prompt::with_char_segments(&req.prompt, &req.segments)?)
}

fn segment(s: Segment) -> SegmentKind {
    match s {
        Segment::Instruction => SegmentKind::Instruction,
        Segment::Task => SegmentKind::Task,
        Segment::Context => SegmentKind::Context,
    }
}

fn lrp_config(a: &AttrArgs) -> (AttributionMethod, LrpConfig) {
    let method = match a.attr {
        AttrName::Lrp => AttributionMethod::Lrp,
        AttrName::Ixg => AttributionMethod::Ixg,
    };
    let rule = match a.attention_rule {
        RuleName::ValuePath => AttentionRule::ValuePath,
        RuleName::BilinearSplit => AttentionRule::BilinearSplit,
    };
    (
        method,
        LrpConfig {
            epsilon: a.lrp_epsilon,
            attention_rule: rule,
        },
    )
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let (l, h) = s
        .split_once('.')
        .ok_or_else(|| usage(format!("head {s:?} is not LAYER.HEAD")))?;
    Ok((
        l.trim().parse().map_err(|_| usage(format!("bad layer in {s:?}")))?,
        h.trim().parse().map_err(|_| usage(format!("bad head in {s:?}")))?,
    ))
}

pub fn parse_roi(text: &str, outcome: &mut Outcome) -> Result<RoiSpec> {
    Ok(match text {
        "instruction" => RoiSpec::Segment(SegmentKind::Instruction),
        "task" => RoiSpec::Segment(SegmentKind::Task),
        "context" => RoiSpec::Segment(SegmentKind::Context),
        "all" => RoiSpec::AllInputs,
        _ => match text.split_once(':') {
            Some(("span", r)) => {
                let (a, b) = r
                    .split_once('-')
                    .ok_or_else(|| usage(format!("span {r:?} is not START-END")))?;
                let a: usize = a.parse().map_err(|_| usage(format!("bad span start {a:?}")))?;
                let b: usize = b.parse().map_err(|_| usage(format!("bad span end {b:?}")))?;
                RoiSpec::InputSpan(vec![a..b])
            }
            Some(("heads", list)) => RoiSpec::HeadSet(
                list.split(',')
                    .map(parse_pair)
                    .collect::<Result<Vec<_>>>()?,
            ),
            Some((which @ ("ctx-heads" | "param-heads"), file)) => {
                let path = PathBuf::from(file);
                let sets: HeadSets = read_json(&path)?;
                outcome.inputs.push(path);
                if which == "ctx-heads" {
                    sets.ctx_roi()
                } else {
                    sets.param_roi()
                }
            }
            _ => return Err(usage(format!("unknown roi {text:?}"))),
        },
    })
}

fn stop_tokens(stops: &[String]) -> Result<Vec<TokenId>> {
    stops
        .iter()
        .map(|s| {
            let s = s.replace("\\n", "\n");
            match Tokenizer.encode(&s).as_slice() {
                [t] => Ok(*t),
                _ => Err(usage(format!("stop {s:?} must be a single byte"))),
            }
        })
        .collect()
}

pub fn decode_config(
    m: &MethodArgs,
    default_roi: &str,
    exec: Exec,
    outcome: &mut Outcome,
) -> Result<DecodeConfig> {
    let method = match m.method {
        MethodName::Greedy => DecodeMethod::Greedy,
        MethodName::Nucleus => {
            outcome.seed = Some(m.seed);
            DecodeMethod::Nucleus { p: m.p, seed: m.seed }
        }
        MethodName::Cad => DecodeMethod::Cad {
            alpha: m.alpha,
            drop: segment(m.cad_drop),
        },
        MethodName::Dola => DecodeMethod::Dola {
            contrast_layer: m.contrast_layer,
            plausibility_beta: m.dola_beta,
        },
        MethodName::Agd => {
            let (attr_method, lrp) = lrp_config(&m.attr);
            DecodeMethod::Agd(AgdConfig {
                attr_method,
                lrp,
                roi: parse_roi(m.roi.as_deref().unwrap_or(default_roi), outcome)?,
                k: m.k,
                pi_min: m.pmin,
                tau: m.tau,
            })
        }
    };
    let mut cfg = DecodeConfig::new(method, m.max_new_tokens).with_stop(stop_tokens(&m.stop)?);
    cfg.exec = exec;
    Ok(cfg)
}

pub fn run_decode(cmd: &DecodeCmd) -> Result<Outcome> {
    let mut outcome = Outcome {
        inputs: vec![cmd.model.model.clone(), cmd.request.clone()],
        ..Outcome::default()
    };
    let prompt = load_request(&cmd.request)?;
    let exec = Exec::with_jobs(cmd.model.jobs);
    let cfg = decode_config(&cmd.method, "instruction", exec, &mut outcome)?;
    let result = with_model!(cmd.model, m => decode(m, &prompt, &cfg)?);
    if let Some(out) = &cmd.out {
        write_jsonl(out, &result.steps)?;
        outcome.outputs.push(out.clone());
    }
    eprintln!(
        "decoded {} tokens, {:.0}% guided, {:.1} ms",
        result.output.len(),
        100.0 * result.stats.gated_fraction,
        result.stats.wall_time_ms
    );
    println!(
        "{}",
        json!({
            "text": result.text,
            "output": result.output,
            "stats": result.stats,
            "config": cfg,
        })
    );
    Ok(outcome)
}

fn attribute_json<T: Scalar>(model: &Model<T>, prompt: &Prompt, cmd: &AttributeCmd) -> Result<Value> {
    let (logits, cache) = forward(model, &prompt.tokens)?;
    let target = match (&cmd.target_id, &cmd.target_text) {
        (Some(id), _) => *id,
        (None, Some(t)) => *Tokenizer
            .encode(t)
            .first()
            .ok_or_else(|| usage("empty --target-text"))?,
        (None, None) => argmax(&logits),
    };
    let (method, lrp) = lrp_config(&cmd.attr);
    let map = attribute(model, &cache, target, method, &lrp)?;
    let heatmap = Heatmap::from_map(&map, &prompt.tokens, cmd.raw);
    let heads: Vec<Vec<f64>> = (0..map.n_layers())
        .map(|l| map.head_relevance.row(l).iter().map(|x| x.as_f64()).collect())
        .collect();
    Ok(json!({
        "target": target,
        "target_display": Tokenizer.display(target),
        "method": method,
        "target_logit": map.target_logit.as_f64(),
        "absorbed": map.absorbed.as_f64(),
        "input_relevance": map.input_relevance.iter().map(|x| x.as_f64()).collect::<Vec<_>>(),
        "head_relevance": heads,
        "heatmap": heatmap,
    }))
}

pub fn run_attribute(cmd: &AttributeCmd) -> Result<Outcome> {
    let mut outcome = Outcome {
        inputs: vec![cmd.model.model.clone(), cmd.request.clone()],
        ..Outcome::default()
    };
    let prompt = load_request(&cmd.request)?;
    let value = with_model!(cmd.model, m => attribute_json(m, &prompt, cmd)?);
    eprintln!(
        "attributed target {} over {} positions",
        value["target_display"], prompt.len()
    );
    emit(cmd.out.as_deref(), &value, &mut outcome)?;
    Ok(outcome)
}

fn qa_format(f: FormatName) -> QaFormat {
    match f {
        FormatName::Chat => QaFormat::Chat,
        FormatName::Compact => QaFormat::Compact,
    }
}

#[derive(Serialize)]
struct TraceLine<'a> {
    id: &'a str,
    steps: &'a [agd_core::StepTrace],
}

pub fn run_eval(cmd: &EvalCmd) -> Result<Outcome> {
    let mut outcome = Outcome {
        inputs: vec![cmd.model.model.clone(), cmd.data.clone()],
        ..Outcome::default()
    };
    let exec = Exec::with_jobs(cmd.model.jobs);
    let default_roi = match cmd.task {
        TaskName::If => "instruction",
        TaskName::Qa => "context",
    };
    let cfg = decode_config(&cmd.method, default_roi, exec, &mut outcome)?;
    let (mut report, traces, ids): (EvalReport, _, Vec<String>) = match cmd.task {
        TaskName::If => {
            let samples: Vec<IfSample> = read_jsonl(&cmd.data)?;
            let (r, t) = with_model!(cmd.model, m =>
                harness::eval_instruction_following_model(m, &samples, &cfg, exec)?);
            (r, t, samples.into_iter().map(|s| s.id).collect())
        }
        TaskName::Qa => {
            let samples: Vec<QaSample> = read_jsonl(&cmd.data)?;
            let format = qa_format(cmd.format);
            let (r, t) = with_model!(cmd.model, m =>
                harness::eval_qa_model(m, &samples, format, &cfg, exec)?);
            (r, t, samples.into_iter().map(|s| s.id).collect())
        }
    };
    report.config = json!({
        "decode": report.config,
        "task": cmd.task,
        "format": cmd.format,
        "data": cmd.data,
        "model": cmd.model.model,
        "precision": cmd.model.precision,
        "seed": cmd.method.seed,
    });
    write_json(&cmd.out, &report)?;
    outcome.outputs.push(cmd.out.clone());
    if let Some(path) = &cmd.traces {
        let lines: Vec<TraceLine> = ids
            .iter()
            .zip(&traces)
            .map(|(id, steps)| TraceLine { id, steps })
            .collect();
        write_jsonl(path, &lines)?;
        outcome.outputs.push(path.clone());
    }
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "{} samples ({} failed): PLA {} ILA {} recall {} guided {:.1}%",
        report.verdicts.len(),
        report.n_failed,
        fmt(report.pla),
        fmt(report.ila),
        fmt(report.recall),
        100.0 * report.gated_fraction
    );
    Ok(outcome)
}

pub fn run_extract_heads(cmd: &ExtractHeadsCmd) -> Result<Outcome> {
    let mut outcome = Outcome {
        inputs: vec![cmd.model.model.clone(), cmd.data.clone()],
        ..Outcome::default()
    };
    let samples: Vec<CounterfactualSample> = read_jsonl(&cmd.data)?;
    let (method, lrp) = lrp_config(&cmd.attr);
    let cfg = HeadScoreConfig {
        method,
        lrp,
        format: qa_format(cmd.format),
        target: match cmd.target {
            TargetName::First => TargetMode::First,
            TargetName::MeanOverAnswer => TargetMode::MeanOverAnswer,
        },
    };
    let exec = Exec::with_jobs(cmd.model.jobs);
    let scores = with_model!(cmd.model, m => head_difference_scores(m, &samples, &cfg, exec)?);
    let sets = extract_head_sets(&scores, cmd.n)?;
    eprintln!(
        "{} samples: context heads {:?}, parametric heads {:?}",
        samples.len(),
        sets.ctx_heads,
        sets.param_heads
    );
    write_json(&cmd.out, &sets)?;
    outcome.outputs.push(cmd.out.clone());
    Ok(outcome)
}

pub fn run_calibrate(cmd: &CalibrateCmd) -> Result<Outcome> {
    let mut outcome = Outcome {
        inputs: vec![cmd.model.model.clone(), cmd.data.clone()],
        ..Outcome::default()
    };
    let prompts: Vec<Prompt> = match cmd.task {
        TaskName::If => read_jsonl::<IfSample>(&cmd.data)?
            .iter()
            .map(IfSample::prompt)
            .collect(),
        TaskName::Qa => read_jsonl::<QaSample>(&cmd.data)?
            .iter()
            .map(|s| qa_prompt(&s.question, s.context.as_deref(), qa_format(cmd.format)))
            .collect(),
    };
    let stops = stop_tokens(&cmd.stop)?;
    let exec = Exec::with_jobs(cmd.model.jobs);
    let cal = with_model!(cmd.model, m =>
        calibrate_entropy_threshold(m, &prompts, cmd.percentile, cmd.max_new_tokens, &stops, exec)?);
    eprintln!(
        "tau = {:.6} nats ({} percentile of {} steps)",
        cal.tau, cal.percentile, cal.n_steps
    );
    emit(cmd.out.as_deref(), &cal, &mut outcome)?;
    Ok(outcome)
}

pub fn run_gen_task(cmd: &GenTaskCmd) -> Result<Outcome> {
    let mut outcome = Outcome::default();
    let spec = match &cmd.spec {
        Some(p) => {
            outcome.inputs.push(p.clone());
            read_json::<ToyTaskSpec>(p)?
        }
        None => {
            let kind = match cmd.kind {
                KindName::KvLookup => ToyTaskKind::KvLookup,
                KindName::KeywordInstruction => ToyTaskKind::KeywordInstruction,
            };
            let mut s = ToyTaskSpec::new(kind, cmd.n_train, cmd.n_eval, cmd.seed);
            s.noise_rate = cmd.noise;
            s
        }
    };
    outcome.seed = Some(spec.seed);
    let corpus = generate_toy_task(&spec)?;
    fs::create_dir_all(&cmd.out_dir).map_err(|e| agd_core::Error::Io {
        path: cmd.out_dir.clone(),
        source: e,
    })?;
    let path = |name: &str| cmd.out_dir.join(name);
    match &corpus {
        ToyCorpus::KvLookup {
            parametric,
            train,
            eval,
            counterfactual,
        } => {
            write_jsonl(&path("train.jsonl"), train)?;
            write_jsonl(&path("eval.jsonl"), eval)?;
            write_jsonl(&path("counterfactual.jsonl"), counterfactual)?;
            write_json(&path("parametric.json"), parametric)?;
            outcome.outputs.extend(
                ["train.jsonl", "eval.jsonl", "counterfactual.jsonl", "parametric.json"].map(path),
            );
        }
        ToyCorpus::KeywordInstruction { train, eval } => {
            write_jsonl(&path("train.jsonl"), train)?;
            write_jsonl(&path("eval.jsonl"), eval)?;
            outcome.outputs.extend(["train.jsonl", "eval.jsonl"].map(path));
        }
    }
    write_json(&path("spec.json"), &spec)?;
    outcome.outputs.push(path("spec.json"));
    eprintln!("wrote toy task to {}", cmd.out_dir.display());
    Ok(outcome)
}

fn sequences(path: &Path, task: TaskName) -> Result<Vec<TrainSequence>> {
    Ok(match task {
        TaskName::If => read_jsonl::<IfSample>(path)?
            .iter()
            .map(TrainSequence::from_if)
            .collect(),
        TaskName::Qa => read_jsonl::<QaSample>(path)?
            .iter()
            .map(TrainSequence::from_qa)
            .collect(),
    })
}

pub fn run_train(cmd: &TrainCmd) -> Result<Outcome> {
    let mut outcome = Outcome {
        inputs: vec![cmd.train.clone()],
        seed: Some(cmd.seed),
        ..Outcome::default()
    };
    let train = sequences(&cmd.train, cmd.task)?;
    let held_out = match &cmd.eval {
        Some(p) => {
            outcome.inputs.push(p.clone());
            Some(sequences(p, cmd.task)?)
        }
        None => None,
    };
    let mut config = ModelConfig::toy(cmd.layers, cmd.heads, cmd.d_model);
    config.max_seq_len = cmd.max_seq_len;
    config.validate()?;
    let mut tc = TrainConfig::new(cmd.steps, cmd.lr, cmd.seed);
    tc.batch_size = cmd.batch;
    tc.clip_norm = (cmd.clip > 0.0).then_some(cmd.clip);
    let exec = Exec::with_jobs(cmd.jobs);
    let before = match &held_out {
        Some(h) => Some(mean_loss(&Model::<f32>::random(config.clone(), cmd.seed)?, h, exec)?),
        None => None,
    };
    let (model, log) = train_toy_model::<f32>(config, &train, &tc, exec)?;
    let after = match &held_out {
        Some(h) => Some(mean_loss(&model, h, exec)?),
        None => None,
    };
    save_model(&model, &cmd.out)?;
    outcome.outputs.push(cmd.out.clone());
    if let (Some(b), Some(a)) = (before, after) {
        eprintln!("held-out loss {b:.4} -> {a:.4}");
    }
    println!(
        "{}",
        json!({"losses": log.losses, "held_out_before": before, "held_out_after": after})
    );
    Ok(outcome)
}

pub fn run_judge(cmd: &JudgeCmd) -> Result<Outcome> {
    let outcome = Outcome {
        inputs: vec![cmd.data.clone(), cmd.report.clone()],
        outputs: vec![cmd.out.clone()],
        seed: None,
    };
    let samples: Vec<IfSample> = read_jsonl(&cmd.data)?;
    let report: EvalReport = read_json(&cmd.report)?;
    let mut config = JudgeConfig::new(&cmd.endpoint, &cmd.judge_model);
    config.token_env = cmd.token_env.clone();
    config.timeout_secs = cmd.timeout;
    config.max_retries = cmd.retries;
    let judge = Judge::new(config)?;
    let mut records = Vec::new();
    for id in report.passing_ids() {
        let Some(sample) = samples.iter().find(|s| s.id == id) else {
            bail!(agd_core::Error::Data(format!("report sample {id} missing from dataset")));
        };
        let verdict = report
            .verdicts
            .iter()
            .find(|v| v.id == id)
            .context("verdict disappeared")?;
        records.push(judge_response(&judge, id, &sample.task, &verdict.output)?);
    }
    write_jsonl(&cmd.out, &records)?;
    let scores: Vec<f64> = records.iter().filter_map(|r| r.score).collect();
    let mean = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
    eprintln!("judged {} passing samples", records.len());
    println!(
        "{}",
        json!({
            "n_judged": records.len(),
            "n_scored": scores.len(),
            "quality_score": mean,
            "judge_model": cmd.judge_model,
            "temperature": "endpoint-default",
        })
    );
    Ok(outcome)
}
