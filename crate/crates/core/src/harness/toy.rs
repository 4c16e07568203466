//! Generated desk-scale tasks: keyword instructions and key-value lookup.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::constraints::ConstraintSpec;
use super::data::{qa_prompt, IfSample, QaFormat, QaSample};
use crate::error::{Error, Result};
use crate::heads::CounterfactualSample;
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyTaskKind {
    KeywordInstruction,
    KvLookup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub kind: ToyTaskKind,
    pub n_train: usize,
    pub n_eval: usize,
    /// Fraction of training labels replaced by the parametric answer
    /// (`kv_lookup`) or by an unconstrained reference (`keyword_instruction`).
    #[serde(default)]
    pub noise_rate: f64,
    pub seed: u64,
    /// Distinct keys, drawn from `A..=Z`.
    #[serde(default = "default_keys")]
    pub n_keys: usize,
    /// Key-value pairs shown per context, the queried one included.
    #[serde(default = "default_pairs")]
    pub pairs_per_context: usize,
    /// Fraction of training samples asked without a context.
    #[serde(default = "default_closed_book")]
    pub closed_book_fraction: f64,
    #[serde(default = "default_vocabulary")]
    pub vocabulary: Vec<String>,
    /// Words eligible as constraint keywords; empty means the whole
    /// vocabulary.
    #[serde(default)]
    pub keywords: Vec<String>,
}

fn default_keys() -> usize {
    8
}
fn default_pairs() -> usize {
    3
}
fn default_closed_book() -> f64 {
    0.25
}
fn default_vocabulary() -> Vec<String> {
    [
        "sun", "moon", "river", "forest", "stone", "wind", "rain", "fire", "snow", "leaf", "bird",
        "cloud",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

impl ToyTaskSpec {
    pub fn new(kind: ToyTaskKind, n_train: usize, n_eval: usize, seed: u64) -> Self {
        Self {
            kind,
            n_train,
            n_eval,
            noise_rate: 0.0,
            seed,
            n_keys: default_keys(),
            pairs_per_context: default_pairs(),
            closed_book_fraction: default_closed_book(),
            vocabulary: default_vocabulary(),
            keywords: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(m));
        if self.n_train == 0 || self.n_eval == 0 {
            return bad("sample counts must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!("noise rate {} outside [0, 1)", self.noise_rate));
        }
        if !(0.0..1.0).contains(&self.closed_book_fraction) {
            return bad(format!(
                "closed-book fraction {} outside [0, 1)",
                self.closed_book_fraction
            ));
        }
        match self.kind {
            ToyTaskKind::KvLookup => {
                if !(1..=26).contains(&self.n_keys) {
                    return bad(format!("n_keys {} outside 1..=26", self.n_keys));
                }
                if self.pairs_per_context == 0 || self.pairs_per_context > self.n_keys {
                    return bad(format!(
                        "pairs_per_context {} must be in 1..={}",
                        self.pairs_per_context, self.n_keys
                    ));
                }
            }
            ToyTaskKind::KeywordInstruction => {
                if self.vocabulary.len() < 3 {
                    return bad("vocabulary needs at least 3 words".into());
                }
                for w in &self.vocabulary {
                    if w.is_empty() || !w.chars().all(|c| c.is_ascii_lowercase()) {
                        return bad(format!("vocabulary word {w:?} is not lowercase ascii"));
                    }
                }
                for k in &self.keywords {
                    if !self.vocabulary.contains(k) {
                        return bad(format!("keyword {k:?} not in vocabulary"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One training sequence; loss is taken on positions `loss_start..`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSequence {
    pub tokens: Vec<TokenId>,
    pub loss_start: usize,
}

impl TrainSequence {
    pub fn from_prompt_completion(prompt: Vec<TokenId>, completion: &str) -> Self {
        let loss_start = prompt.len();
        let mut tokens = prompt;
        tokens.extend(Tokenizer.encode(completion));
        Self { tokens, loss_start }
    }

    /// Compact-layout prompt followed by the first answer and a newline.
    pub fn from_qa(s: &QaSample) -> Self {
        let p = qa_prompt(&s.question, s.context.as_deref(), QaFormat::Compact);
        Self::from_prompt_completion(p.tokens, &format!("{}\n", s.answers[0]))
    }

    /// Instruction prompt followed by the reference output and a newline.
    pub fn from_if(s: &IfSample) -> Self {
        let reference = s.reference.clone().unwrap_or_default();
        Self::from_prompt_completion(s.prompt().tokens, &format!("{reference}\n"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyCorpus {
    KvLookup {
        /// The key-to-value map the training labels leak when noisy.
        parametric: BTreeMap<String, String>,
        train: Vec<QaSample>,
        eval: Vec<QaSample>,
        /// Eval samples recast for head extraction.
        counterfactual: Vec<CounterfactualSample>,
    },
    KeywordInstruction {
        train: Vec<IfSample>,
        eval: Vec<IfSample>,
    },
}

impl ToyCorpus {
    pub fn train_sequences(&self) -> Vec<TrainSequence> {
        match self {
            Self::KvLookup { train, .. } => train.iter().map(TrainSequence::from_qa).collect(),
            Self::KeywordInstruction { train, .. } => {
                train.iter().map(TrainSequence::from_if).collect()
            }
        }
    }

    pub fn eval_sequences(&self) -> Vec<TrainSequence> {
        match self {
            Self::KvLookup { eval, .. } => eval.iter().map(TrainSequence::from_qa).collect(),
            Self::KeywordInstruction { eval, .. } => {
                eval.iter().map(TrainSequence::from_if).collect()
            }
        }
    }
}

pub fn generate_toy_task(spec: &ToyTaskSpec) -> Result<ToyCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(match spec.kind {
        ToyTaskKind::KvLookup => kv_lookup(spec, &mut rng),
        ToyTaskKind::KeywordInstruction => keyword_instruction(spec, &mut rng),
    })
}

fn random_value(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(3..=4);
    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

fn kv_lookup(spec: &ToyTaskSpec, rng: &mut ChaCha8Rng) -> ToyCorpus {
    let keys: Vec<String> = (0..spec.n_keys)
        .map(|i| ((b'A' + i as u8) as char).to_string())
        .collect();
    let parametric: BTreeMap<String, String> =
        keys.iter().map(|k| (k.clone(), random_value(rng))).collect();

    let context_sample = |rng: &mut ChaCha8Rng| {
        let chosen: Vec<&String> = keys.choose_multiple(rng, spec.pairs_per_context).collect();
        let pairs: Vec<(String, String)> = chosen
            .iter()
            .map(|&k| loop {
                let v = random_value(rng);
                if v != parametric[k] {
                    break (k.clone(), v);
                }
            })
            .collect();
        let (qk, qv) = pairs[rng.gen_range(0..pairs.len())].clone();
        let context = pairs
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        (qk, qv, context)
    };

    let mut train = Vec::with_capacity(spec.n_train);
    for i in 0..spec.n_train {
        let id = format!("train-{i}");
        if rng.gen::<f64>() < spec.closed_book_fraction {
            let k = keys[rng.gen_range(0..keys.len())].clone();
            train.push(QaSample {
                id,
                answers: vec![parametric[&k].clone()],
                question: k,
                context: None,
            });
            continue;
        }
        let (k, v, context) = context_sample(rng);
        let label = if rng.gen::<f64>() < spec.noise_rate {
            parametric[&k].clone()
        } else {
            v
        };
        train.push(QaSample {
            id,
            question: k,
            context: Some(context),
            answers: vec![label],
        });
    }
    let mut eval = Vec::with_capacity(spec.n_eval);
    let mut counterfactual = Vec::with_capacity(spec.n_eval);
    for i in 0..spec.n_eval {
        let (k, v, context) = context_sample(rng);
        counterfactual.push(CounterfactualSample {
            question: k.clone(),
            counterfactual_context: context.clone(),
            c_cf: v.clone(),
            c_gold: parametric[&k].clone(),
        });
        eval.push(QaSample {
            id: format!("eval-{i}"),
            question: k,
            context: Some(context),
            answers: vec![v],
        });
    }
    ToyCorpus::KvLookup {
        parametric,
        train,
        eval,
        counterfactual,
    }
}

fn keyword_instruction(spec: &ToyTaskSpec, rng: &mut ChaCha8Rng) -> ToyCorpus {
    let vocab = &spec.vocabulary;
    let keywords = if spec.keywords.is_empty() {
        vocab.clone()
    } else {
        spec.keywords.clone()
    };
    let sample = |id: String, rng: &mut ChaCha8Rng, noisy: bool| {
        let keyword = keywords[rng.gen_range(0..keywords.len())].clone();
        let include = rng.gen_bool(0.5);
        let topic = loop {
            let t = &vocab[rng.gen_range(0..vocab.len())];
            if *t != keyword {
                break t.clone();
            }
        };
        let len = rng.gen_range(3..=6);
        let mut words = vec![topic.clone()];
        while words.len() < len {
            let w = &vocab[rng.gen_range(0..vocab.len())];
            if *w != keyword {
                words.push(w.clone());
            }
        }
        if include && !noisy {
            let at = rng.gen_range(1..=words.len());
            words.insert(at, keyword.clone());
        }
        let (instruction, constraint) = if include {
            (
                format!("use {keyword}"),
                ConstraintSpec::KeywordsInclude {
                    keywords: vec![keyword],
                },
            )
        } else {
            (
                format!("avoid {keyword}"),
                ConstraintSpec::KeywordsExclude {
                    keywords: vec![keyword],
                },
            )
        };
        IfSample {
            id,
            instruction,
            task: format!("about {topic}"),
            constraints: vec![constraint, ConstraintSpec::MaxWords { n: 8 }],
            reference: Some(words.join(" ")),
        }
    };
    let train = (0..spec.n_train)
        .map(|i| {
            let noisy = rng.gen::<f64>() < spec.noise_rate;
            sample(format!("train-{i}"), rng, noisy)
        })
        .collect();
    let eval = (0..spec.n_eval)
        .map(|i| sample(format!("eval-{i}"), rng, false))
        .collect();
    ToyCorpus::KeywordInstruction { train, eval }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::constraints::check_constraint;
    use std::collections::BTreeSet;

    #[test]
    fn deterministic_and_disjoint() {
        for kind in [ToyTaskKind::KvLookup, ToyTaskKind::KeywordInstruction] {
            let mut spec = ToyTaskSpec::new(kind, 40, 10, 3);
            spec.noise_rate = 0.3;
            let a = generate_toy_task(&spec).unwrap();
            assert_eq!(a, generate_toy_task(&spec).unwrap());
            let ids = |c: &ToyCorpus| -> (BTreeSet<String>, BTreeSet<String>) {
                match c {
                    ToyCorpus::KvLookup { train, eval, .. } => (
                        train.iter().map(|s| s.id.clone()).collect(),
                        eval.iter().map(|s| s.id.clone()).collect(),
                    ),
                    ToyCorpus::KeywordInstruction { train, eval } => (
                        train.iter().map(|s| s.id.clone()).collect(),
                        eval.iter().map(|s| s.id.clone()).collect(),
                    ),
                }
            };
            let (t, e) = ids(&a);
            assert!(t.is_disjoint(&e));
        }
    }

    #[test]
    fn clean_answers_are_in_context() {
        let spec = ToyTaskSpec::new(ToyTaskKind::KvLookup, 200, 50, 1);
        let ToyCorpus::KvLookup {
            train,
            eval,
            counterfactual,
            parametric,
        } = generate_toy_task(&spec).unwrap()
        else {
            panic!("wrong kind")
        };
        for s in train.iter().chain(&eval) {
            match &s.context {
                Some(c) => assert!(c.contains(&format!("{}={}", s.question, s.answers[0]))),
                None => assert_eq!(parametric[&s.question], s.answers[0]),
            }
        }
        for c in &counterfactual {
            assert_ne!(c.c_cf, c.c_gold);
        }
    }

    #[test]
    fn references_satisfy_constraints() {
        let spec = ToyTaskSpec::new(ToyTaskKind::KeywordInstruction, 50, 20, 7);
        let ToyCorpus::KeywordInstruction { train, eval } = generate_toy_task(&spec).unwrap()
        else {
            panic!("wrong kind")
        };
        for s in train.iter().chain(&eval) {
            s.validate().unwrap();
            let r = s.reference.as_deref().unwrap();
            assert!(s.constraints.iter().all(|c| check_constraint(r, c)), "{s:?}");
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = ToyTaskSpec::new(ToyTaskKind::KeywordInstruction, 1, 1, 0);
        s.keywords = vec!["ocean".into()];
        assert!(generate_toy_task(&s).is_err());
        let mut s = ToyTaskSpec::new(ToyTaskKind::KvLookup, 1, 1, 0);
        s.noise_rate = 1.0;
        assert!(generate_toy_task(&s).is_err());
        s.noise_rate = 0.0;
        s.n_eval = 0;
        assert!(generate_toy_task(&s).is_err());
    }

    #[test]
    fn sequences_score_the_answer() {
        let spec = ToyTaskSpec::new(ToyTaskKind::KvLookup, 5, 2, 0);
        let corpus = generate_toy_task(&spec).unwrap();
        for seq in corpus.train_sequences() {
            let tail = Tokenizer.decode(&seq.tokens[seq.loss_start..]);
            assert!(tail.ends_with('\n'));
            assert!(tail.len() >= 4);
        }
    }
}
