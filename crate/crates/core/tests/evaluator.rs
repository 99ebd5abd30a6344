use std::sync::Arc;

use evonas_core::data::{generate_synthetic, reference_counts, stratified_split, Splits};
use evonas_core::evaluator::*;
use evonas_core::fitness::{Bounds, ObjectiveConfig, ObjectiveKind};
use evonas_core::genome::{instantiate, random_genome, repair, Genome, SearchSpace};
use evonas_core::nn::{encode_model, InputShape, Network, Precision};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{loop_count_flops, random_small_network, serialized_param_count};

fn splits(seed: u64, total: usize) -> Splits {
    let (p, n) = reference_counts(total);
    let set = generate_synthetic(p, n, 24, 24, seed).unwrap();
    stratified_split(Arc::new(set), [0.6, 0.2, 0.2], seed).unwrap()
}

fn genome(text: &str) -> Genome {
    text.parse().unwrap()
}

/// Two small conv blocks and a narrow head; learns the blob task in two epochs.
const GOOD: &str = "id=00000000000000a1 parents=- lr=0.02 momentum=0.9 batch_size=16 features=3 \
                    f0=conv:8:3:1:relu f1=pool:2:2 f2=conv:16:3:1:relu head=1 h0=dense:32";

fn settings(precision: Precision) -> EvalSettings {
    EvalSettings {
        precision,
        ..EvalSettings::default()
    }
}

#[test]
fn flops_match_loop_count_oracle_on_random_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let net = random_small_network(&mut rng);
        assert_eq!(count_flops_inference(&net), loop_count_flops(&net));
    }
}

#[test]
fn flops_are_the_sum_of_per_layer_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let net = random_small_network(&mut rng);
        let trace = net.shape_trace().unwrap();
        let per_layer: u64 = net.layers().iter().zip(trace).map(|(l, s)| layer_flops(l, s)).sum();
        assert_eq!(count_flops_inference(&net), per_layer);
        // dropping trailing layers removes exactly their share
        let layers = net.layers().to_vec();
        let head = layers.len() - 1;
        let last = layer_flops(&layers[head], net.shape_trace().unwrap()[head]);
        let shorter = Network::new(layers[..head].to_vec(), net.input_shape());
        if let Ok(shorter) = shorter {
            assert_eq!(count_flops_inference(&shorter) + last, count_flops_inference(&net));
        }
    }
}

#[test]
fn zero_feature_genome_costs_only_its_head() {
    let g = genome("id=0000000000000001 parents=- lr=0.01 momentum=0.5 batch_size=16 features=0 head=0");
    let input = InputShape::new(3, 24, 24);
    let (flops, params) = genome_cost(&g, input).unwrap();
    assert_eq!(flops, 2 * 3 * 24 * 24 * 2);
    assert_eq!(params, (3 * 24 * 24 * 2 + 2) as u64);
}

#[test]
fn genome_cost_agrees_with_instantiated_network() {
    let space = SearchSpace {
        input_shape: InputShape::new(3, 32, 32),
        out_channels: vec![4, 8, 16],
        dense_units: (8, 64),
        ..SearchSpace::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..100 {
        let g = random_genome(&mut rng, &space, None);
        let net = instantiate::<f64>(&g, space.input_shape, i).unwrap();
        let (flops, params) = genome_cost(&g, space.input_shape).unwrap();
        assert_eq!(flops, count_flops_inference(&net));
        assert_eq!(flops, loop_count_flops(&net));
        assert_eq!(params, count_params(&net));
    }
}

#[test]
fn param_count_matches_serialized_tensor_walk() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let net = random_small_network(&mut rng);
        assert_eq!(count_params(&net), serialized_param_count(&encode_model(&net)));
    }
}

#[test]
fn one_batch_budget_applies_exactly_one_step() {
    let s = splits(1, 300);
    let g = genome(GOOD);
    let budget = TrainBudget {
        epochs: 1,
        max_batches_per_epoch: Some(1),
    };
    let t = train_short::<f64>(&g, &s.train, &budget, 5).unwrap();
    assert_eq!(t.steps, 1);
    let init = instantiate::<f64>(&g, s.train.set().shape(), 5).unwrap();
    assert_ne!(init.checksum(), t.network.checksum());
    let two = TrainBudget {
        epochs: 2,
        max_batches_per_epoch: Some(3),
    };
    assert_eq!(train_short::<f64>(&g, &s.train, &two, 5).unwrap().steps, 6);
    let full = TrainBudget {
        epochs: 1,
        max_batches_per_epoch: None,
    };
    let per_epoch = s.train.len().div_ceil(16);
    assert_eq!(train_short::<f64>(&g, &s.train, &full, 5).unwrap().steps, per_epoch);
}

#[test]
fn same_seed_gives_identical_weights() {
    let s = splits(2, 300);
    let g = genome(GOOD);
    let budget = TrainBudget::default();
    let a = train_short::<f64>(&g, &s.train, &budget, 9).unwrap();
    let b = train_short::<f64>(&g, &s.train, &budget, 9).unwrap();
    assert_eq!(a.network, b.network);
    let c = train_short::<f64>(&g, &s.train, &budget, 10).unwrap();
    assert_ne!(a.network, c.network);
}

#[test]
fn fixture_genome_learns_the_synthetic_task() {
    let s = splits(3, 2000);
    let r = evaluate(
        &genome(GOOD),
        &s,
        &settings(Precision::F32),
        &ObjectiveConfig::none(),
        3,
        0,
    );
    assert!(r.is_ok(), "{}", r.failure);
    assert!(r.val_f1 > 0.9, "val F1 {}", r.val_f1);
    assert!(r.val_auc > 0.95, "val AUC {}", r.val_auc);
}

#[test]
fn deeper_network_has_higher_latency() {
    let input = InputShape::new(3, 24, 24);
    let base = genome(
        "id=0000000000000002 parents=- lr=0.01 momentum=0.5 batch_size=16 features=2 \
         f0=conv:16:3:1:relu f1=conv:16:3:1:relu head=0",
    );
    let deep = genome(
        "id=0000000000000003 parents=- lr=0.01 momentum=0.5 batch_size=16 features=4 \
         f0=conv:16:3:1:relu f1=conv:16:3:1:relu f2=conv:16:3:1:relu f3=conv:16:3:1:relu head=0",
    );
    let cfg = LatencyConfig {
        batch_size: 32,
        reps: 9,
        warmup: 2,
    };
    let a = measure_latency(&instantiate::<f32>(&base, input, 1).unwrap(), &cfg, 1).unwrap();
    let b = measure_latency(&instantiate::<f32>(&deep, input, 1).unwrap(), &cfg, 1).unwrap();
    assert!(b.median_s_per_batch > a.median_s_per_batch, "{a:?} {b:?}");
    assert_eq!(a.reps, 9);
    assert_eq!(a.patches_per_s, 32.0 / a.median_s_per_batch);
    assert!(a.min_s <= a.median_s_per_batch && a.median_s_per_batch <= a.max_s);
}

#[test]
fn objective_none_scores_validation_f1() {
    let s = splits(4, 300);
    let r = evaluate(
        &genome(GOOD),
        &s,
        &settings(Precision::F32),
        &ObjectiveConfig::none(),
        4,
        2,
    );
    assert!(r.is_ok());
    assert_eq!(r.fitness, r.val_f1);
    assert_eq!(r.worker_id, 2);
    assert!(r.latency.is_some());
    assert!(r.started_unix_s <= r.finished_unix_s);
}

fn strip_timing(mut r: EvalRecord) -> EvalRecord {
    r.train_time_s = 0.0;
    r.started_unix_s = 0.0;
    r.finished_unix_s = 0.0;
    r.latency = None;
    r
}

#[test]
fn flop_proxy_record_matches_golden() {
    let s = splits(5, 1000);
    let objective = ObjectiveConfig::new(
        ObjectiveKind::FlopProxy,
        -0.3,
        Some(Bounds::new(0.0, 1e6).unwrap()),
        true,
    )
    .unwrap();
    let r = evaluate(&genome(GOOD), &s, &settings(Precision::F64), &objective, 5, 1);
    assert!(r.latency.is_none());
    let again = evaluate(&genome(GOOD), &s, &settings(Precision::F64), &objective, 5, 1);
    assert_eq!(strip_timing(r.clone()), strip_timing(again));

    let path = format!("{}/tests/fixtures/golden_record.json", env!("CARGO_MANIFEST_DIR"));
    if std::env::var_os("EVONAS_BLESS").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(&strip_timing(r.clone())).unwrap()).unwrap();
    }
    let golden: EvalRecord = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(strip_timing(r), strip_timing(golden));
}

#[test]
fn unrepaired_collapsing_genome_is_recorded_as_failure() {
    let s = splits(6, 300);
    let bad = genome(
        "id=0000000000000004 parents=- lr=0.01 momentum=0.5 batch_size=16 features=3 \
         f0=conv:8:7:3:relu f1=conv:8:7:3:relu f2=conv:8:7:3:relu head=0",
    );
    let r = evaluate(&bad, &s, &settings(Precision::F32), &ObjectiveConfig::none(), 6, 0);
    assert_eq!(r.status, EvalStatus::Failed);
    assert_eq!(r.fitness, f64::NEG_INFINITY);
    assert!(r.failure.starts_with("shape"), "{}", r.failure);
    // repair makes the same genome trainable
    let fixed = repair(&bad, s.train.set().shape());
    assert!(evaluate(&fixed, &s, &settings(Precision::F32), &ObjectiveConfig::none(), 6, 0).is_ok());
}

#[test]
fn diverging_training_is_recorded_as_failure() {
    let s = splits(7, 300);
    let g = genome(
        "id=0000000000000005 parents=- lr=1e30 momentum=0.9 batch_size=16 features=1 \
         f0=conv:8:3:1:relu head=1 h0=dense:32",
    );
    let r = evaluate(&g, &s, &settings(Precision::F32), &ObjectiveConfig::none(), 7, 0);
    assert_eq!(r.status, EvalStatus::Failed);
    assert!(r.failure.contains("non-finite"), "{}", r.failure);
}

#[test]
fn stub_evaluator_reports_its_outcome() {
    let stub = StubEvaluator::new(|g: &Genome| StubOutcome {
        val_f1: 0.5,
        cost: g.features.len() as f64 * 10.0,
        sleep: std::time::Duration::ZERO,
        fail: g.features.is_empty(),
    });
    let g = genome(GOOD);
    let r = stub.evaluate(&g, 3);
    assert_eq!((r.val_f1, r.flops_inference, r.fitness, r.worker_id), (0.5, 30, 0.5, 3));
    assert_eq!(r.latency.unwrap().median_s_per_batch, 30.0);
    let empty = genome("id=0000000000000006 parents=- lr=0.01 momentum=0.5 batch_size=16 features=0 head=0");
    assert!(!stub.evaluate(&empty, 0).is_ok());
}
