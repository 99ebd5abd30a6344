use std::cmp::Ordering;

use evonas_core::evaluator::{EvalRecord, EvalStatus};
use evonas_core::fitness::*;
use evonas_core::genome::GenomeId;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ok_record(id: u64, v: f64, flops: u64) -> EvalRecord {
    let mut r = EvalRecord::failed(GenomeId(id), 0, String::new());
    r.status = EvalStatus::Ok;
    r.val_f1 = v;
    r.flops_inference = flops;
    r
}

fn flop_config(alpha: f64, lo: f64, hi: f64) -> ObjectiveConfig {
    ObjectiveConfig::new(
        ObjectiveKind::FlopProxy,
        alpha,
        Some(Bounds::new(lo, hi).unwrap()),
        true,
    )
    .unwrap()
}

fn unclamped(alpha: f64, lo: f64, hi: f64) -> ObjectiveConfig {
    ObjectiveConfig {
        clamp: false,
        ..flop_config(alpha, lo, hi)
    }
}

fn best(records: &[EvalRecord]) -> GenomeId {
    records.iter().min_by(|a, b| compare(a, b)).unwrap().genome_id
}

fn scored(records: &[EvalRecord], cfg: &ObjectiveConfig) -> Vec<EvalRecord> {
    records
        .iter()
        .cloned()
        .map(|mut r| {
            rescore(&mut r, cfg);
            r
        })
        .collect()
}

#[test]
fn worked_fitness_examples() {
    assert_eq!(fitness(0.8, 0.5, -0.2), 0.8 + -0.2 * 0.5);
    assert!((fitness(0.8, 0.5, -0.2) - 0.7).abs() < 1e-15);
    let b = Bounds::new(0.001, 0.1).unwrap();
    assert!((normalize_objective(0.0505, b, true) - 0.5).abs() < 1e-15);
    let mut r = ok_record(1, 0.8, 500);
    rescore(&mut r, &flop_config(-0.2, 0.0, 1000.0));
    assert_eq!(r.objective_m, 0.5);
    assert_eq!(r.fitness, fitness(0.8, 0.5, -0.2));
}

#[test]
fn each_objective_reads_its_measurement() {
    let mut r = ok_record(1, 0.6, 300);
    r.params = 40;
    assert_eq!(raw_objective(&r, ObjectiveKind::FlopProxy), Some(300.0));
    assert_eq!(raw_objective(&r, ObjectiveKind::ParamCount), Some(40.0));
    assert_eq!(raw_objective(&r, ObjectiveKind::MeasuredLatency), None);
    let latency = ObjectiveConfig::new(
        ObjectiveKind::MeasuredLatency,
        -1.0,
        Some(Bounds::new(0.0, 1.0).unwrap()),
        true,
    )
    .unwrap();
    // a success without the needed measurement cannot be ranked
    assert_eq!(score(&r, &latency).f, f64::NEG_INFINITY);
}

#[test]
fn failures_never_outrank_successes() {
    let cfg = flop_config(-1000.0, 0.0, 1.0);
    let mut ok = ok_record(5, 0.0, u64::MAX);
    rescore(&mut ok, &cfg);
    let mut failed = EvalRecord::failed(GenomeId(0), 0, "x".into());
    rescore(&mut failed, &cfg);
    let mut timed_out = EvalRecord::timed_out(GenomeId(1), 0, std::time::Duration::from_secs(1));
    rescore(&mut timed_out, &cfg);
    assert!(ok.fitness.is_finite());
    assert_eq!(compare(&ok, &failed), Ordering::Less);
    assert_eq!(compare(&ok, &timed_out), Ordering::Less);
    assert_eq!(compare(&failed, &timed_out), Ordering::Less);
}

#[test]
fn shuffled_fixture_sorts_to_golden_order() {
    // (id, v, flops)
    let fixture = [
        (7, 0.9, 500),
        (3, 0.9, 400),
        (9, 0.9, 400),
        (1, 0.7, 100),
        (4, 0.95, 9000),
        (2, 0.7, 100),
        (8, 0.0, 0),
    ];
    let mut records: Vec<EvalRecord> = fixture.iter().map(|&(id, v, f)| ok_record(id, v, f)).collect();
    records.push(EvalRecord::failed(GenomeId(6), 0, "x".into()));
    records.push(EvalRecord::failed(GenomeId(5), 0, "x".into()));
    let records = scored(&records, &ObjectiveConfig::none());
    let golden = [4, 3, 9, 7, 1, 2, 8, 5, 6];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rng);
        shuffled.sort_by(compare);
        let ids: Vec<u64> = shuffled.iter().map(|r| r.genome_id.0).collect();
        assert_eq!(ids, golden);
    }
}

fn arb_records() -> impl Strategy<Value = Vec<EvalRecord>> {
    prop::collection::vec((0u32..=20, 0u64..2000), 2..30).prop_map(|items| {
        items
            .into_iter()
            .enumerate()
            .map(|(i, (v, f))| ok_record(i as u64, v as f64 / 20.0, f))
            .collect()
    })
}

proptest! {
    #[test]
    fn argmax_is_invariant_to_scaling_alpha_with_the_range(
        records in arb_records(),
        alpha in -2.0f64..-0.01,
        scale in prop::sample::select(vec![0.25f64, 0.5, 2.0, 4.0, 8.0]),
    ) {
        // alpha·m is unchanged when (hi − lo) and alpha scale together
        let base = scored(&records, &unclamped(alpha, 0.0, 2000.0));
        let stretched = scored(&records, &unclamped(alpha * scale, 0.0, 2000.0 * scale));
        prop_assert_eq!(best(&base), best(&stretched));
    }

    #[test]
    fn worse_cost_never_raises_fitness(
        v in 0.0f64..1.0,
        alpha in -5.0f64..0.0,
        a in 0u64..5000,
        b in 0u64..5000,
        clamp in any::<bool>(),
    ) {
        let cfg = ObjectiveConfig::new(ObjectiveKind::FlopProxy, alpha, Some(Bounds::new(100.0, 4000.0).unwrap()), clamp).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(score(&ok_record(0, v, hi), &cfg).f <= score(&ok_record(0, v, lo), &cfg).f);
    }

    #[test]
    fn clamped_objective_stays_in_unit_interval(raw in -1e6f64..1e6, lo in -100.0f64..100.0, width in 0.001f64..100.0) {
        let m = normalize_objective(raw, Bounds::new(lo, lo + width).unwrap(), true);
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn zero_alpha_ranks_by_validation_only(records in arb_records()) {
        let cfg = flop_config(0.0, 0.0, 2000.0);
        let s = scored(&records, &cfg);
        for r in &s {
            prop_assert_eq!(r.fitness, r.val_f1);
        }
        let mut sorted = s.clone();
        sorted.sort_by(compare);
        for w in sorted.windows(2) {
            prop_assert!(w[0].val_f1 >= w[1].val_f1);
        }
    }

    #[test]
    fn compare_is_a_total_order(records in arb_records()) {
        let s = scored(&records, &flop_config(-0.5, 0.0, 2000.0));
        for a in &s {
            prop_assert_eq!(compare(a, a), Ordering::Equal);
            for b in &s {
                prop_assert_eq!(compare(a, b), compare(b, a).reverse());
            }
        }
    }
}
