//! Acceptance suite: one line per criterion, non-zero exit on any failure.
//!
//! Run with `cargo test -p agd-core --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use agd_core::attribution::{attribute, AttributionMethod, Heatmap, LrpConfig};
use agd_core::decoding::{
    agd_select, argmax, decode, select_candidates, shannon_entropy, AgdConfig, DecodeConfig,
    DecodeMethod, Prompt, RoiSpec, SegmentKind,
};
use agd_core::format::{load_model, save_model};
use agd_core::forward::forward_embeddings;
use agd_core::harness::{
    answer_recall, calibrate_entropy_threshold, check_constraint, eval_qa_model,
    generate_toy_task, nearest_rank, pla_ila, qa_prompt, sequence_loss_grad, ConstraintSpec,
    QaFormat, ToyCorpus, ToyTaskKind, ToyTaskSpec, TrainSequence,
};
use agd_core::heads::{
    extract_head_sets, head_difference_scores, HeadScore, HeadScoreConfig,
    TargetMode,
};
use agd_core::judge::{evaluation_prompt, question_prompt, quality_score, Answer, QualityVerdict};
use agd_core::scalar::softmax;
use agd_core::{forward, input_gradient, Activation, Exec, Model, ModelConfig, Tokenizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_config(rng: &mut ChaCha8Rng, min_layers: usize) -> ModelConfig {
    let layers = rng.gen_range(min_layers..=4);
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let d_model = [16, 32, 64][rng.gen_range(0..3)];
    let mut c = ModelConfig::toy(layers, heads, d_model);
    c.activation = if rng.gen_bool(0.5) {
        Activation::Gelu
    } else {
        Activation::Relu
    };
    c
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize) -> Vec<u32> {
    let mut t = vec![Tokenizer::BOS];
    t.extend((1..len).map(|_| rng.gen_range(32..127)));
    t
}

fn random_text(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

fn c1_lrp_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    let n = 60;
    for i in 0..n {
        let cfg = random_config(&mut rng, 0);
        let m64 = Model::<f64>::random(cfg, i).unwrap();
        let m32 = m64.cast::<f32>();
        let len = rng.gen_range(2..=20);
        let tokens = random_tokens(&mut rng, len);
        let target = rng.gen_range(0..260);
        let lrp = LrpConfig::default();
        let (_, c64) = forward(&m64, &tokens).unwrap();
        let a = attribute(&m64, &c64, target, AttributionMethod::Lrp, &lrp).unwrap();
        let e = ((a.total_input() + a.absorbed) - a.target_logit).abs() / a.target_logit.abs();
        worst64 = worst64.max(e);
        let (_, c32) = forward(&m32, &tokens).unwrap();
        let a = attribute(&m32, &c32, target, AttributionMethod::Lrp, &lrp).unwrap();
        let total = a.total_input() as f64 + a.absorbed as f64;
        let e = (total - a.target_logit as f64).abs() / (a.target_logit as f64).abs();
        worst32 = worst32.max(e);
    }
    ensure(worst64 <= 1e-4 && worst32 <= 1e-3, || {
        format!("worst relative error f64 {worst64:.2e}, f32 {worst32:.2e}")
    })?;
    Ok(format!("{n} triples; worst relative error f64 {worst64:.1e}, f32 {worst32:.1e}"))
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

fn c2_gradient_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-4;
    let (mut worst_in, mut worst_tr) = (0.0f64, 0.0f64);
    let n = 20;
    for i in 0..n {
        let mut cfg = random_config(&mut rng, 1);
        cfg.activation = Activation::Gelu;
        let mut m = Model::<f64>::random(cfg.clone(), 100 + i).unwrap();
        let len = rng.gen_range(2..=10);
        let tokens = random_tokens(&mut rng, len);
        let target = rng.gen_range(0..256);

        let (_, cache) = forward(&m, &tokens).unwrap();
        let g = input_gradient(&m, &cache, target).unwrap();
        let (mut an, mut fd) = (Vec::new(), Vec::new());
        for _ in 0..40 {
            let (r, c) = (rng.gen_range(0..len), rng.gen_range(0..cfg.d_model));
            let mut up = cache.embeddings.clone();
            *up.at_mut(r, c) += h;
            let mut down = cache.embeddings.clone();
            *down.at_mut(r, c) -= h;
            let lu = forward_embeddings(&m, &tokens, up).logits[target as usize];
            let ld = forward_embeddings(&m, &tokens, down).logits[target as usize];
            an.push(g.at(r, c));
            fd.push((lu - ld) / (2.0 * h));
        }
        worst_in = worst_in.max(rel(&an, &fd));

        let seq = TrainSequence {
            tokens: tokens.clone(),
            loss_start: 1,
        };
        let (_, _, grads) = sequence_loss_grad(&m, &seq).unwrap();
        let flat: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.2.to_vec()).collect();
        let (mut an, mut fd) = (Vec::new(), Vec::new());
        for _ in 0..40 {
            let t = rng.gen_range(0..flat.len());
            let k = rng.gen_range(0..flat[t].len());
            let orig = m.tensors()[t].2[k];
            m.tensors_mut()[t][k] = orig + h;
            let lu = sequence_loss_grad(&m, &seq).unwrap().0;
            m.tensors_mut()[t][k] = orig - h;
            let ld = sequence_loss_grad(&m, &seq).unwrap().0;
            m.tensors_mut()[t][k] = orig;
            an.push(flat[t][k]);
            fd.push((lu - ld) / (2.0 * h));
        }
        worst_tr = worst_tr.max(rel(&an, &fd));
    }
    ensure(worst_in <= 1e-3 && worst_tr <= 1e-3, || {
        format!("worst relative error input {worst_in:.2e}, trainer {worst_tr:.2e}")
    })?;
    Ok(format!(
        "{n} models; worst relative error input-gradient {worst_in:.1e}, trainer {worst_tr:.1e}"
    ))
}

fn c3_reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let models: Vec<Model<f64>> = (0..5)
        .map(|i| Model::random(random_config(&mut rng, 1), 300 + i).unwrap())
        .collect();
    let agd = |k: usize, tau: Option<f64>| {
        DecodeMethod::Agd(AgdConfig {
            attr_method: AttributionMethod::Lrp,
            lrp: LrpConfig::default(),
            roi: RoiSpec::Segment(SegmentKind::Instruction),
            k,
            pi_min: 0.0,
            tau,
        })
    };
    let n = 100;
    for i in 0..n {
        let m = &models[i % models.len()];
        let (a, b) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let prompt = Prompt::from_parts(&[
            (Some(SegmentKind::Instruction), &random_text(&mut rng, a)),
            (None, "\n"),
            (Some(SegmentKind::Task), &random_text(&mut rng, b)),
        ]);
        let run = |method: DecodeMethod| {
            let mut cfg = DecodeConfig::new(method, 5);
            cfg.exec = Exec::Sequential;
            decode(m, &prompt, &cfg).unwrap().output
        };
        let greedy = run(DecodeMethod::Greedy);
        let checks = [
            ("agd k=1", run(agd(1, None)), greedy.clone()),
            ("gated tau=inf", run(agd(5, Some(f64::INFINITY))), greedy.clone()),
            ("gated tau=0", run(agd(5, Some(0.0))), run(agd(5, None))),
            (
                "cad alpha=0",
                run(DecodeMethod::Cad {
                    alpha: 0.0,
                    drop: SegmentKind::Instruction,
                }),
                greedy.clone(),
            ),
            (
                "nucleus p->0",
                run(DecodeMethod::Nucleus { p: 1e-12, seed: i as u64 }),
                greedy.clone(),
            ),
        ];
        for (name, got, want) in checks {
            ensure(got == want, || format!("prompt {i}: {name} gave {got:?}, expected {want:?}"))?;
        }
    }
    Ok(format!("{n} prompts x 5 identities, all token-exact"))
}

fn oracle_candidates(p: &[f64], k: usize, pi_min: f64) -> (Vec<u32>, bool) {
    let mut idx: Vec<u32> = (0..p.len() as u32).collect();
    idx.sort_by(|&a, &b| p[b as usize].total_cmp(&p[a as usize]).then(a.cmp(&b)));
    let kept: Vec<u32> = idx.iter().take(k).copied().filter(|&t| p[t as usize] >= pi_min).collect();
    if kept.is_empty() {
        (vec![idx[0]], true)
    } else {
        (kept, false)
    }
}

fn c4_candidate_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut fallbacks = 0;
    let n = 1000;
    for i in 0..n {
        let v = rng.gen_range(2..300);
        let mut w: Vec<f64> = (0..v).map(|_| rng.gen::<f64>().powi(rng.gen_range(1..8))).collect();
        if i % 5 == 0 {
            // quantized weights produce ties
            for x in w.iter_mut() {
                *x = (*x * 4.0).round();
            }
            w[0] += 1.0;
        }
        let s: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|x| x / s).collect();
        let k = rng.gen_range(1..10);
        let pi_min = [0.0, 0.01, 0.05, 0.2, 0.9][rng.gen_range(0..5)];
        let got = select_candidates(&p, k, pi_min).map_err(|e| e.to_string())?;
        let (want, fb) = oracle_candidates(&p, k, pi_min);
        fallbacks += fb as usize;
        ensure(got.tokens() == want && got.fallback == fb, || {
            format!("distribution {i}: got {:?}, oracle {want:?}", got.tokens())
        })?;
    }
    ensure(fallbacks > 0, || "no fallback case exercised".into())?;
    Ok(format!("{n} distributions agree ({fallbacks} fallback singletons)"))
}

fn c5_head_oracle() -> Outcome {
    let m = Model::<f64>::random(ModelConfig::toy(2, 4, 32), 5).unwrap();
    let mut spec = ToyTaskSpec::new(ToyTaskKind::KvLookup, 1, 32, 5);
    spec.noise_rate = 0.0;
    let ToyCorpus::KvLookup { counterfactual, .. } = generate_toy_task(&spec).unwrap() else {
        return Err("wrong corpus kind".into());
    };
    let cfg = HeadScoreConfig {
        method: AttributionMethod::Lrp,
        lrp: LrpConfig::default(),
        format: QaFormat::Compact,
        target: TargetMode::First,
    };
    let scores = head_difference_scores(&m, &counterfactual, &cfg, Exec::Parallel).unwrap();

    // straight-line oracle: loop samples, sum element relevances per head
    let per_head = |prompt: &Prompt, answer: &str| -> Vec<f64> {
        let target = answer.as_bytes()[0] as u32;
        let (_, cache) = forward(&m, &prompt.tokens).unwrap();
        let map = attribute(&m, &cache, target, AttributionMethod::Lrp, &LrpConfig::default()).unwrap();
        let mut out = Vec::new();
        for l in 0..2 {
            for h in 0..4 {
                let z = &map.z_relevance[l];
                let mut s = 0.0;
                for i in 0..z.rows {
                    for c in h * 8..(h + 1) * 8 {
                        s += z.at(i, c);
                    }
                }
                out.push(s);
            }
        }
        out
    };
    let mut ob = vec![0.0; 8];
    let mut cb = vec![0.0; 8];
    for s in &counterfactual {
        let o = per_head(&qa_prompt(&s.question, Some(&s.counterfactual_context), QaFormat::Compact), &s.c_cf);
        let c = per_head(&qa_prompt(&s.question, None, QaFormat::Compact), &s.c_gold);
        for j in 0..8 {
            ob[j] += o[j];
            cb[j] += c[j];
        }
    }
    let n = counterfactual.len() as f64;
    let oracle: Vec<HeadScore> = (0..8)
        .map(|j| HeadScore {
            layer: j / 4,
            head: j % 4,
            d_value: ob[j] / n - cb[j] / n,
        })
        .collect();
    let mut worst = 0.0f64;
    for (a, b) in scores.iter().zip(&oracle) {
        ensure((a.layer, a.head) == (b.layer, b.head), || "head order differs".into())?;
        worst = worst.max((a.d_value - b.d_value).abs());
    }
    ensure(worst <= 1e-6, || format!("max |D - oracle| = {worst:.2e}"))?;

    let sets = extract_head_sets(&scores, 2).unwrap();
    let mut by_d: Vec<&HeadScore> = oracle.iter().collect();
    by_d.sort_by(|a, b| b.d_value.total_cmp(&a.d_value).then((a.layer, a.head).cmp(&(b.layer, b.head))));
    let top: Vec<(usize, usize)> = by_d[..2].iter().map(|s| (s.layer, s.head)).collect();
    by_d.sort_by(|a, b| a.d_value.total_cmp(&b.d_value).then((a.layer, a.head).cmp(&(b.layer, b.head))));
    let bottom: Vec<(usize, usize)> = by_d[..2].iter().map(|s| (s.layer, s.head)).collect();
    ensure(sets.ctx_heads == top && sets.param_heads == bottom, || {
        format!("sets {:?}/{:?} vs oracle {top:?}/{bottom:?}", sets.ctx_heads, sets.param_heads)
    })?;

    let scaled: Vec<HeadScore> = (0..8)
        .map(|j| HeadScore {
            layer: j / 4,
            head: j % 4,
            d_value: 3.7 * ob[j] / n - 3.7 * cb[j] / n,
        })
        .collect();
    let rescaled = extract_head_sets(&scaled, 2).unwrap();
    ensure(
        rescaled.ctx_heads == sets.ctx_heads && rescaled.param_heads == sets.param_heads,
        || "rescaling changed the sets".into(),
    )?;
    Ok(format!(
        "32 samples; max |D - oracle| {worst:.1e}; ctx {:?}, param {:?}",
        sets.ctx_heads, sets.param_heads
    ))
}

fn kv_fixture() -> Model<f32> {
    load_model(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/kv_lookup.agdw")).unwrap()
}

/// The recipe the committed fixture was trained on.
fn kv_spec() -> ToyTaskSpec {
    let mut spec = ToyTaskSpec::new(ToyTaskKind::KvLookup, 4000, 100, 1);
    spec.noise_rate = 0.2;
    spec
}

fn c6_selection_flip() -> Outcome {
    let model = kv_fixture();
    let ToyCorpus::KvLookup { eval, .. } = generate_toy_task(&kv_spec()).unwrap() else {
        return Err("wrong corpus kind".into());
    };
    let (mut scanned, mut flips) = (0, 0);
    for s in &eval {
        let prompt = qa_prompt(&s.question, s.context.as_deref(), QaFormat::Compact);
        let span = prompt.segments.get(SegmentKind::Context).unwrap();
        let cfg = AgdConfig {
            attr_method: AttributionMethod::Lrp,
            lrp: LrpConfig::default(),
            roi: RoiSpec::InputSpan(vec![span.clone()]),
            k: 5,
            pi_min: 0.05,
            tau: None,
        };
        let mut tokens = prompt.tokens.clone();
        for _ in 0..5 {
            let (logits, cache) = forward(&model, &tokens).unwrap();
            let probs = softmax(&logits);
            let greedy = argmax(&probs);
            let cands = select_candidates(&probs, 5, 0.05).unwrap();
            scanned += 1;
            // brute force: attribute every candidate, sum the span by hand
            let mut best: Option<(f64, f64, u32)> = None;
            for c in &cands.entries {
                let map = attribute(&model, &cache, c.token, AttributionMethod::Lrp, &LrpConfig::default()).unwrap();
                let score: f64 = span.clone().map(|i| map.input_relevance[i] as f64).sum();
                let better = match best {
                    None => true,
                    Some((bs, bp, bt)) => {
                        score > bs || (score == bs && (c.probability > bp || (c.probability == bp && c.token < bt)))
                    }
                };
                if better {
                    best = Some((score, c.probability, c.token));
                }
            }
            let brute = best.unwrap().2;
            if brute != greedy {
                flips += 1;
                let (chosen, _) = agd_select(&model, &tokens, &cfg, Exec::Sequential).unwrap();
                ensure(chosen == brute, || {
                    format!("{}: agd chose {chosen}, attribution argmax {brute}", s.id)
                })?;
            }
            if greedy == b'\n' as u32 {
                break;
            }
            tokens.push(greedy);
        }
    }
    ensure(flips > 0, || format!("no flips among {scanned} steps"))?;
    Ok(format!("{flips} flip steps among {scanned} scanned; agd followed attribution in all"))
}

fn c7_behavioral() -> Outcome {
    let model = kv_fixture();
    let ToyCorpus::KvLookup { eval, .. } = generate_toy_task(&kv_spec()).unwrap() else {
        return Err("wrong corpus kind".into());
    };
    let stop = [b'\n' as u32];
    let run = |method: DecodeMethod| {
        let cfg = DecodeConfig::new(method, 5).with_stop(stop);
        eval_qa_model(&model, &eval, QaFormat::Compact, &cfg, Exec::Parallel).unwrap().0
    };
    let agd = |tau: Option<f64>| {
        DecodeMethod::Agd(AgdConfig {
            attr_method: AttributionMethod::Lrp,
            lrp: LrpConfig::default(),
            roi: RoiSpec::Segment(SegmentKind::Context),
            k: 5,
            pi_min: 0.05,
            tau,
        })
    };
    let greedy = run(DecodeMethod::Greedy).recall.unwrap();
    let ungated = run(agd(None)).recall.unwrap();
    let prompts: Vec<Prompt> = eval
        .iter()
        .map(|s| qa_prompt(&s.question, s.context.as_deref(), QaFormat::Compact))
        .collect();
    let tau = calibrate_entropy_threshold(&model, &prompts, 0.8, 5, &stop, Exec::Parallel)
        .unwrap()
        .tau;
    let gated_report = run(agd(Some(tau)));
    let gated = gated_report.recall.unwrap();
    let frac = gated_report.gated_fraction;
    let summary = format!(
        "recall greedy {greedy:.3}, agd {ungated:.3}, gated {gated:.3} (tau {tau:.3}, {:.1}% guided)",
        100.0 * frac
    );
    ensure(ungated >= greedy, || format!("agd below greedy: {summary}"))?;
    ensure((0.15..=0.25).contains(&frac), || format!("guided fraction off: {summary}"))?;
    let gain = ungated - greedy;
    if gain > 0.0 {
        ensure(gated - greedy >= 0.9 * gain, || format!("gated keeps < 90% of gain: {summary}"))?;
    }
    Ok(summary)
}

fn c8_metrics() -> Outcome {
    use ConstraintSpec::*;
    let inc = |w: &[&str]| KeywordsInclude {
        keywords: w.iter().map(|s| s.to_string()).collect(),
    };
    let exc = |w: &[&str]| KeywordsExclude {
        keywords: w.iter().map(|s| s.to_string()).collect(),
    };
    let table: Vec<(&str, Vec<ConstraintSpec>)> = vec![
        ("The sun is bright", vec![inc(&["sun"]), NoCommas]),
        ("rain, snow", vec![NoCommas]),
        ("one two three four", vec![MinWords { n: 4 }, MaxWords { n: 3 }]),
        ("Dear [name]", vec![PlaceholderCountMin { n: 1 }]),
        ("night falls", vec![exc(&["night"]), inc(&["falls"]), MaxWords { n: 5 }]),
        ("{\"a\": 1}", vec![JsonFormat]),
        ("forests hide a riddle", vec![inc(&["forests", "riddle"]), NoCommas]),
        ("short", vec![MinWords { n: 2 }]),
        ("a b c", vec![MaxWords { n: 3 }, exc(&["d"])]),
        ("[x] and [y], ok", vec![PlaceholderCountMin { n: 3 }, NoCommas]),
    ];
    let outcomes: Vec<Vec<bool>> = table
        .iter()
        .map(|(out, cs)| cs.iter().map(|c| check_constraint(out, c)).collect())
        .collect();
    let (pla, ila) = pla_ila(&outcomes).unwrap();
    ensure(pla == 0.5 && ila == 11.0 / 17.0, || format!("PLA {pla}, ILA {ila}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let n = rng.gen_range(1..50);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..4.0)).collect();
        let p = rng.gen_range(0.01..0.99);
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        let mut rank = 1;
        while (rank as f64) < p * n as f64 {
            rank += 1;
        }
        let got = nearest_rank(&v, p).unwrap();
        ensure(got == sorted[rank - 1], || format!("percentile {p} of {v:?}: {got}"))?;
    }
    let mut worst = 0.0f64;
    for n in [1usize, 2, 3, 7, 100, 260, 1000] {
        let u = vec![1.0 / n as f64; n];
        worst = worst.max((shannon_entropy(&u).unwrap() - (n as f64).ln()).abs());
    }
    ensure(worst <= 1e-12, || format!("uniform entropy error {worst:.2e}"))?;
    let recall = answer_recall("It is in New York.", &["New York City".to_string()]);
    ensure((recall - 2.0 / 3.0).abs() < 1e-15, || format!("recall {recall}"))?;
    Ok(format!("PLA 5/10, ILA 11/17 exact; 200 percentile draws exact; uniform entropy error {worst:.1e}"))
}

fn c9_constraints() -> Outcome {
    use ConstraintSpec::*;
    let w = |ws: &[&str]| ws.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let cases: Vec<(&str, ConstraintSpec, bool)> = vec![
        ("The forests hold a riddle.", KeywordsInclude { keywords: w(&["forests", "riddle"]) }, true),
        ("A RIDDLE in the Forests", KeywordsInclude { keywords: w(&["forests", "riddle"]) }, true),
        ("a riddle in the forest", KeywordsInclude { keywords: w(&["forests", "riddle"]) }, false),
        ("riddles everywhere", KeywordsInclude { keywords: w(&["riddle"]) }, false),
        ("forests-riddle", KeywordsInclude { keywords: w(&["forests", "riddle"]) }, true),
        ("", KeywordsInclude { keywords: w(&["sun"]) }, false),
        ("The night is dark", KeywordsExclude { keywords: w(&["night"]) }, false),
        ("NIGHT falls", KeywordsExclude { keywords: w(&["night"]) }, false),
        ("nightly news", KeywordsExclude { keywords: w(&["night"]) }, true),
        ("a bright day", KeywordsExclude { keywords: w(&["night", "dark"]) }, true),
        ("dark day", KeywordsExclude { keywords: w(&["night", "dark"]) }, false),
        ("", KeywordsExclude { keywords: w(&["night"]) }, true),
        ("a, b", NoCommas, false),
        ("a b", NoCommas, true),
        ("", NoCommas, true),
        ("1,000", NoCommas, false),
        ("one two three", MinWords { n: 3 }, true),
        ("one two", MinWords { n: 3 }, false),
        ("  one   two  three  ", MinWords { n: 3 }, true),
        ("one-two three", MinWords { n: 3 }, false),
        ("one two three", MaxWords { n: 3 }, true),
        ("one two three four", MaxWords { n: 3 }, false),
        ("", MaxWords { n: 0 }, true),
        ("word", MaxWords { n: 0 }, false),
        ("Dear [name], from [place]", PlaceholderCountMin { n: 2 }, true),
        ("Dear [name]", PlaceholderCountMin { n: 2 }, false),
        ("[] and [ ]", PlaceholderCountMin { n: 1 }, true),
        ("[]", PlaceholderCountMin { n: 1 }, false),
        ("[a [b] c]", PlaceholderCountMin { n: 1 }, true),
        ("no brackets", PlaceholderCountMin { n: 1 }, false),
    ];
    ensure(cases.len() == 30, || "table must have 30 rows".into())?;
    for (i, (out, spec, want)) in cases.iter().enumerate() {
        let got = check_constraint(out, spec);
        ensure(got == *want, || format!("case {i}: {out:?} {spec:?} -> {got}, expected {want}"))?;
    }
    Ok("30/30 truth-table rows agree".into())
}

fn c10_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.agdw");
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..5 {
        let m = Model::<f32>::random(random_config(&mut rng, 0), 1000 + i).unwrap();
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        let tokens = random_tokens(&mut rng, 12);
        let (a, _) = forward(&m, &tokens).unwrap();
        let (b, _) = forward(&back, &tokens).unwrap();
        ensure(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), || {
            format!("model {i}: logits differ after round trip")
        })?;
    }
    let m = Model::<f64>::random(ModelConfig::toy(3, 2, 32), 11).unwrap();
    let tokens = random_tokens(&mut rng, 10);
    let (_, cache) = forward(&m, &tokens).unwrap();
    let map = attribute(&m, &cache, 70, AttributionMethod::Lrp, &LrpConfig::default()).unwrap();
    let hm = Heatmap::from_map(&map, &tokens, false);
    let json = serde_json::to_string(&hm).unwrap();
    let hm: Heatmap = serde_json::from_str(&json).unwrap();
    for (l, row) in hm.layers.iter().enumerate() {
        let max = row.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        ensure((max - 1.0).abs() < 1e-12, || format!("layer {l} max {max}"))?;
    }
    Ok(format!("5 weight files bitwise; heatmap {} layers at max 1", hm.layers.len()))
}

const QUESTION_EXPECTED: &str = "The following is a prompt that is used to evaluate the generations from a large language model. We do not know how to evaluate the quality of model answers for this prompt. Can you come up with 5 or less questions that can break down the quality to  simpler evaluation tasks that we can then ask about the model answer? Each question should have a simple yes, no answer.\nPrompt: Write a riddle about forests.\nList all sub questions in the following format:\nOutput:\n1: Question: <question>\n2: Question: <question>\n...\nN: Question: <question>";

const EVAL_EXPECTED: &str = "We need to evaluate the quality of generations from a large language model. You will be given an input prompt, the response from a language model and a set of questions assessing the quality of the response. You need to review the response against the input prompt and provide an answer to each question as either 'Yes', 'No' or 'Not Applicable' if the question does not apply to the case along with a reason for your answer.\nPrompt: Write a riddle about forests.\nResponse: Tall and green, I hide a riddle.\nQuestions: 1. Is it a riddle?\n2. Is it about forests?\nList your answers in the following format:\nOutput:\n1. Question: <question>. Reason: <reason>: Answer: <answer>\n2. Question: <question>. Reason: <reason>: Answer: <answer>\n...\nN. Question: <question>. Reason: <reason>: Answer: <answer>";

fn c11_judge() -> Outcome {
    let v = |answer| QualityVerdict {
        question: "q".into(),
        reason: "r".into(),
        answer,
    };
    let qs = quality_score(&[v(Answer::Yes), v(Answer::Yes), v(Answer::No), v(Answer::NotApplicable)]).unwrap();
    ensure((qs - 2.0 / 3.0).abs() < 1e-15, || format!("QS {qs}"))?;
    let task = "Write a riddle about forests.";
    ensure(question_prompt(task) == QUESTION_EXPECTED, || "question template differs".into())?;
    let questions = vec!["Is it a riddle?".to_string(), "Is it about forests?".to_string()];
    let e = evaluation_prompt(task, "Tall and green, I hide a riddle.", &questions);
    ensure(e == EVAL_EXPECTED, || "evaluation template differs".into())?;
    let mocked = mocked_round_trip()?;
    Ok(format!("QS 2/3; both templates byte-exact; {mocked}"))
}

#[cfg(feature = "judge")]
fn mocked_round_trip() -> Result<String, String> {
    use agd_core::judge::{judge_response, Judge, JudgeConfig};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let replies = [
        "Output:\n1: Question: Is it a riddle?\n2: Question: Is it about forests?\n3: Question: Is it short?",
        "Output:\n1. Question: Is it a riddle?. Reason: posed as one: Answer: Yes\n2. Question: Is it about forests?. Reason: mentions trees: Answer: Yes\n3. Question: Is it short?. Reason: too long: Answer: No\n",
    ];
    let server = std::thread::spawn(move || {
        for reply in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let payload = serde_json::json!({"choices": [{"message": {"content": reply}}]}).to_string();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
        }
    });
    let judge = Judge::new(JudgeConfig::new(url, "mock")).map_err(|e| e.to_string())?;
    let rec = judge_response(&judge, "s", "Write a riddle about forests.", "Tall and green.")
        .map_err(|e| e.to_string())?;
    server.join().map_err(|_| "mock server panicked".to_string())?;
    ensure(rec.questions.len() == 3 && rec.score == Some(2.0 / 3.0), || format!("{rec:?}"))?;
    Ok("mocked endpoint round trip QS 2/3".into())
}

#[cfg(not(feature = "judge"))]
fn mocked_round_trip() -> Result<String, String> {
    Ok("mocked endpoint skipped (judge feature off)".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("1 LRP conservation", c1_lrp_conservation),
        ("2 gradient fidelity", c2_gradient_fidelity),
        ("3 reduction identities", c3_reductions),
        ("4 candidate-set oracle", c4_candidate_oracle),
        ("5 head-extraction oracle", c5_head_oracle),
        ("6 selection flip", c6_selection_flip),
        ("7 behavioral steering", c7_behavioral),
        ("8 metrics and calibration", c8_metrics),
        ("9 constraint checkers", c9_constraints),
        ("10 file round-trips", c10_round_trips),
        ("11 judge client", c11_judge),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panic".into())));
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
