use std::collections::BTreeSet;
use std::sync::Arc;

use evonas_core::data::*;
use evonas_core::nn::InputShape;
use proptest::prelude::*;

/// Dark 4-connected components in one patch, by flood fill over the
/// per-pixel channel mean.
fn dark_components(set: &PatchSet, i: usize) -> usize {
    let s = set.shape();
    let (h, w) = (s.h, s.w);
    let px = set.patch(i);
    let dark: Vec<bool> = (0..h * w)
        .map(|p| (0..s.c).map(|c| px[c * h * w + p] as f64).sum::<f64>() / (s.c as f64) < DARK_THRESHOLD)
        .collect();
    let mut seen = vec![false; h * w];
    let mut components = 0;
    for start in 0..h * w {
        if !dark[start] || seen[start] {
            continue;
        }
        components += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if dark[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
    }
    components
}

#[test]
fn component_count_agrees_with_every_label() {
    for (seed, side) in [(1, 24), (2, 32), (3, 48)] {
        let (p, n) = reference_counts(1000);
        let set = generate_synthetic(p, n, side, side, seed).unwrap();
        assert_eq!(set.positives(), p);
        for i in 0..set.len() {
            let blobs = dark_components(&set, i);
            if set.labels()[i] == 1 {
                assert!((5..=8).contains(&blobs), "patch {i}: {blobs} blobs");
            } else {
                assert!(blobs <= 1, "patch {i}: {blobs} blobs");
            }
        }
    }
}

#[test]
fn component_threshold_classifier_separates_the_classes() {
    let set = generate_synthetic(500, 1500, 24, 24, 9).unwrap();
    let correct = (0..set.len())
        .filter(|&i| (dark_components(&set, i) >= 3) == (set.labels()[i] == 1))
        .count();
    assert!(correct as f64 / set.len() as f64 >= 0.99);
}

#[test]
fn generator_is_deterministic_per_seed() {
    let a = generate_synthetic(30, 90, 24, 24, 5).unwrap();
    let b = generate_synthetic(30, 90, 24, 24, 5).unwrap();
    assert_eq!(a.encode(), b.encode());
    assert_ne!(a.encode(), generate_synthetic(30, 90, 24, 24, 6).unwrap().encode());
}

#[test]
fn default_ratio_follows_reference_counts() {
    for total in [100, 4000, 4800, 86_154] {
        let (p, n) = reference_counts(total);
        assert_eq!(p + n, total);
        let exact = total as f64 * 21_773.0 / 86_154.0;
        assert!((p as f64 - exact).abs() <= 0.5);
    }
}

#[test]
fn save_load_resave_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let set = generate_synthetic(7, 13, 24, 30, 4).unwrap();
    let a = dir.path().join("a.pset");
    let b = dir.path().join("b.pset");
    save_patchset(&set, &a).unwrap();
    let loaded = load_patchset(&a).unwrap();
    assert_eq!(loaded.shape(), set.shape());
    assert_eq!(loaded.labels(), set.labels());
    assert_eq!(loaded.pixels(), set.pixels());
    save_patchset(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn truncated_file_error_names_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.pset");
    let bytes = generate_synthetic(2, 2, 24, 24, 1).unwrap().encode();
    std::fs::write(&path, &bytes[..100]).unwrap();
    let msg = load_patchset(&path).unwrap_err().to_string();
    assert!(msg.contains(&bytes.len().to_string()) && msg.contains("100"), "{msg}");
}

#[test]
fn batches_are_scaled_to_unit_range() {
    let set = generate_synthetic(2, 2, 24, 24, 1).unwrap();
    let (x, y) = set.batch::<f64>(&[0, 3]);
    assert_eq!(y, vec![set.labels()[0] as usize, set.labels()[3] as usize]);
    assert_eq!(x.item(1)[5], set.patch(3)[5] as f64 / 255.0);
    assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

fn check_partition(set: &Arc<PatchSet>, splits: &Splits) {
    let parts = [&splits.train, &splits.val, &splits.test];
    let mut all = BTreeSet::new();
    let mut total = 0;
    for p in parts {
        total += p.len();
        all.extend(p.indices().iter().copied());
    }
    assert_eq!(total, set.len(), "splits overlap");
    assert_eq!(all, (0..set.len()).collect());
}

#[test]
fn split_fractions_one_zero_zero_keeps_everything_in_train() {
    let set = Arc::new(generate_synthetic(10, 30, 24, 24, 2).unwrap());
    let s = stratified_split(set.clone(), [1.0, 0.0, 0.0], 3).unwrap();
    assert_eq!(s.train.len(), 40);
    assert!(s.val.is_empty() && s.test.is_empty());
}

#[test]
fn split_rejects_bad_fractions_and_tiny_classes() {
    let set = Arc::new(generate_synthetic(2, 30, 24, 24, 2).unwrap());
    assert!(stratified_split(set.clone(), [0.5, 0.2, 0.2], 0).is_err());
    assert!(stratified_split(set, [0.8, 0.1, 0.1], 0).is_err());
}

#[test]
fn same_seed_same_assignment() {
    let set = Arc::new(generate_synthetic(40, 120, 24, 24, 2).unwrap());
    let a = stratified_split(set.clone(), [0.8, 0.1, 0.1], 7).unwrap();
    let b = stratified_split(set.clone(), [0.8, 0.1, 0.1], 7).unwrap();
    let c = stratified_split(set, [0.8, 0.1, 0.1], 8).unwrap();
    assert_eq!(a.train.indices(), b.train.indices());
    assert_eq!(a.test.indices(), b.test.indices());
    assert_ne!(a.train.indices(), c.train.indices());
}

fn arb_set() -> impl Strategy<Value = PatchSet> {
    (0usize..12, 1usize..4, 1usize..9, 1usize..9).prop_flat_map(|(n, c, h, w)| {
        (
            prop::collection::vec(0u8..2, n),
            prop::collection::vec(any::<u8>(), n * c * h * w),
        )
            .prop_map(move |(labels, pixels)| {
                PatchSet::new(InputShape::new(c, h, w), labels, pixels, PatchMeta::default()).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn encode_decode_round_trips(set in arb_set()) {
        let bytes = set.encode();
        prop_assert_eq!(bytes.len(), 24 + set.len() * (1 + set.shape().len()));
        let back = PatchSet::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back.labels(), set.labels());
        prop_assert_eq!(back.pixels(), set.pixels());
    }

    #[test]
    fn splits_partition_and_preserve_class_ratios(
        pos in 20usize..60,
        neg in 20usize..120,
        seed in 0u64..1000,
        fractions in prop::sample::select(vec![[0.8, 0.1, 0.1], [0.6, 0.2, 0.2], [0.5, 0.25, 0.25], [0.34, 0.33, 0.33]]),
    ) {
        let set = Arc::new(generate_synthetic(pos, neg, 24, 24, seed).unwrap());
        let s = stratified_split(set.clone(), fractions, seed).unwrap();
        check_partition(&set, &s);
        for (part, f) in [&s.train, &s.val, &s.test].into_iter().zip(fractions) {
            let p = part.positives() as f64;
            let n = (part.len() - part.positives()) as f64;
            prop_assert!((p - f * pos as f64).abs() <= 1.0, "{p} vs {}", f * pos as f64);
            prop_assert!((n - f * neg as f64).abs() <= 1.0, "{n} vs {}", f * neg as f64);
            prop_assert!(p >= 1.0 && n >= 1.0);
        }
    }
}
