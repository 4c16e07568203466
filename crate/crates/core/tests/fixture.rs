//! Rebuilds the committed kv-lookup fixture from its recipe.
//!
//! Slow (minutes in release); run with `cargo test --release --test fixture -- --ignored`.

use agd_core::format::{load_model, to_bytes};
use agd_core::harness::{generate_toy_task, train_toy_model, ToyTaskKind, ToyTaskSpec, TrainConfig};
use agd_core::{Exec, ModelConfig};

#[test]
#[ignore]
fn kv_fixture_reproduces_bitwise() {
    let mut spec = ToyTaskSpec::new(ToyTaskKind::KvLookup, 4000, 100, 1);
    spec.noise_rate = 0.2;
    let corpus = generate_toy_task(&spec).unwrap();
    let mut config = ModelConfig::toy(2, 2, 32);
    config.max_seq_len = 64;
    let tc = TrainConfig::new(15000, 0.5, 0);
    let (model, _) = train_toy_model::<f32>(config, &corpus.train_sequences(), &tc, Exec::Parallel).unwrap();
    let committed =
        load_model(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/kv_lookup.agdw")).unwrap();
    assert!(to_bytes(&model) == to_bytes(&committed));
}
