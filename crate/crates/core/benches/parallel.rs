use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use agd_core::attribution::{AttributionMethod, LrpConfig};
use agd_core::decoding::{score_candidates, select_candidates};
use agd_core::harness::{qa_prompt, sequence_loss_grad, QaFormat, TrainSequence};
use agd_core::heads::{head_difference_scores, CounterfactualSample, HeadScoreConfig, TargetMode};
use agd_core::scalar::softmax;
use agd_core::{forward, Exec, Model, ModelConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn model() -> Model<f32> {
    Model::random(ModelConfig::toy(4, 4, 64), 7).expect("valid config")
}

fn candidate_scoring(c: &mut Criterion) {
    let m = model();
    let prompt = qa_prompt("K", Some("A=abc K=wxyz Q=lmn R=opq"), QaFormat::Compact);
    let (logits, cache) = forward(&m, &prompt.tokens).unwrap();
    let cands = select_candidates(&softmax(&logits), 8, 0.0).unwrap();
    let roi = prompt.roi(agd_core::SegmentKind::Context).unwrap();
    let mut group = c.benchmark_group("agd_candidate_scoring");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                score_candidates(
                    &m,
                    &cache,
                    &cands,
                    &roi,
                    AttributionMethod::Lrp,
                    &LrpConfig::default(),
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn head_scores(c: &mut Criterion) {
    let m = model();
    let samples: Vec<CounterfactualSample> = (0..16)
        .map(|i| CounterfactualSample {
            question: "B".into(),
            counterfactual_context: format!("A=ab{i} B=cd{i} C=ef{i}"),
            c_cf: format!("cd{i}"),
            c_gold: "zzz".into(),
        })
        .collect();
    let cfg = HeadScoreConfig {
        method: AttributionMethod::Lrp,
        lrp: LrpConfig::default(),
        format: QaFormat::Compact,
        target: TargetMode::First,
    };
    let mut group = c.benchmark_group("head_difference_scores");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| head_difference_scores(&m, black_box(&samples), &cfg, exec).unwrap())
        });
    }
    group.finish();
}

fn batch_gradients(c: &mut Criterion) {
    let m = model();
    let batch: Vec<TrainSequence> = (0..16)
        .map(|i| {
            let p = qa_prompt("C", Some(&format!("A=xa{i} C=yb{i} D=zc{i}")), QaFormat::Compact);
            TrainSequence::from_prompt_completion(p.tokens, &format!("yb{i}\n"))
        })
        .collect();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.try_map(&batch, |s| sequence_loss_grad(&m, s)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, candidate_scoring, head_scores, batch_gradients);
criterion_main!(benches);
