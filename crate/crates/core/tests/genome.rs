use evonas_core::genome::*;
use evonas_core::nn::InputShape;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> String {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{path}: {e}"))
        .trim_end()
        .to_string()
}

fn space(h: usize) -> SearchSpace {
    SearchSpace {
        input_shape: InputShape::new(3, h, h),
        ..SearchSpace::default()
    }
}

#[test]
fn delta_prior_with_beta_one_fixes_every_conv_gene() {
    let prior = ThroughputPrior::delta(256, 4, 1, 1.0).unwrap();
    let space = space(100);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut convs = 0;
    for _ in 0..500 {
        let g = random_genome(&mut rng, &space, Some(&prior));
        for c in g.conv_genes() {
            assert_eq!((c.out_channels, c.kernel, c.stride), (256, 4, 1));
            convs += 1;
        }
        let child = mutate(&g, &mut rng, &MutationRates::ALWAYS, &space, Some(&prior));
        assert!(child
            .conv_genes()
            .all(|c| (c.out_channels, c.kernel, c.stride) == (256, 4, 1)));
    }
    assert!(convs > 500);
}

#[test]
fn beta_zero_kernel_marginal_is_uniform() {
    // one conv layer on a large input so repair never drops a gene
    let space = SearchSpace {
        max_initial_features: 1,
        pool_probability: 0.0,
        ..space(100)
    };
    let prior = ThroughputPrior::delta(256, 4, 1, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws = 10_000;
    let mut counts = [0usize; 8];
    for _ in 0..draws {
        let g = random_genome(&mut rng, &space, Some(&prior));
        let c = g.conv_genes().next().unwrap();
        counts[c.kernel] += 1;
    }
    let p = 1.0 / 7.0;
    let expect = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let mut chi2 = 0.0;
    for &n in &counts[1..] {
        assert!((n as f64 - expect).abs() < 3.0 * sigma, "{counts:?}");
        chi2 += (n as f64 - expect).powi(2) / expect;
    }
    // 6 degrees of freedom, 0.999 quantile
    assert!(chi2 < 22.46, "chi2 {chi2}");
}

#[test]
fn seeded_sampling_is_repeatable() {
    let space = space(100);
    let a = random_genome(&mut ChaCha8Rng::seed_from_u64(9), &space, None);
    let b = random_genome(&mut ChaCha8Rng::seed_from_u64(9), &space, None);
    assert_eq!(a, b);
}

#[test]
fn mutate_with_all_operators_matches_golden_record() {
    let space = space(32);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let parent = random_genome(&mut rng, &space, None);
    let child = mutate(&parent, &mut rng, &MutationRates::ALWAYS, &space, None);
    assert_eq!(parent.to_string(), fixture("mutate_parent.txt"));
    assert_eq!(child.to_string(), fixture("mutate_child.txt"));
}

#[test]
fn crossover_matches_golden_record() {
    let space = space(32);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let a = random_genome(&mut rng, &space, None);
    let b = random_genome(&mut rng, &space, None);
    let child = crossover(&a, &b, &mut rng, &space);
    assert_eq!(child.to_string(), fixture("crossover_child.txt"));
    assert_eq!(child.parent_ids, vec![a.id, b.id]);
}

#[test]
fn mutate_leaves_parent_untouched() {
    let space = space(32);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let parent = random_genome(&mut rng, &space, None);
    let copy = parent.clone();
    let _ = mutate(&parent, &mut rng, &MutationRates::ALWAYS, &space, None);
    assert_eq!(parent, copy);
}

fn arb_gene() -> impl Strategy<Value = LayerGene> {
    prop_oneof![
        (1usize..64, 1usize..9, 1usize..4, any::<bool>()).prop_map(|(o, k, s, relu)| LayerGene::Conv(ConvGene {
            out_channels: o,
            kernel: k,
            stride: s,
            relu
        })),
        (1usize..5, 1usize..4).prop_map(|(size, stride)| LayerGene::Pool(PoolGene { size, stride })),
    ]
}

fn arb_genome() -> impl Strategy<Value = Genome> {
    (
        prop::collection::vec(arb_gene(), 0..16),
        prop::collection::vec(1usize..100, 0..5),
        any::<u64>(),
    )
        .prop_map(|(features, head, id)| Genome {
            id: GenomeId(id),
            parent_ids: Vec::new(),
            features,
            head: head.into_iter().map(|units| DenseGene { units }).collect(),
            learn: LearnParams {
                lr: 0.01,
                momentum: 0.5,
                batch_size: 16,
            },
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn operators_followed_by_repair_stay_valid(seed in any::<u64>(), h in 4usize..40) {
        let space = space(h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_genome(&mut rng, &space, None);
        let b = random_genome(&mut rng, &space, None);
        let m = mutate(&a, &mut rng, &MutationRates::ALWAYS, &space, None);
        let c = crossover(&a, &m, &mut rng, &space);
        for g in [&a, &b, &m, &c] {
            prop_assert!(validate_shapes(g, space.input_shape).is_ok());
            prop_assert!(g.features.len() <= MAX_FEATURE_LAYERS && g.head.len() <= MAX_HEAD_LAYERS);
        }
    }

    #[test]
    fn repair_is_idempotent_and_valid(g in arb_genome(), h in 1usize..30, w in 1usize..30) {
        let input = InputShape::new(2, h, w);
        let once = repair(&g, input);
        prop_assert!(validate_shapes(&once, input).is_ok());
        prop_assert_eq!(repair(&once, input), once.clone());
        if validate_shapes(&g, input).is_ok() && g.features.len() <= MAX_FEATURE_LAYERS && g.head.len() <= MAX_HEAD_LAYERS {
            prop_assert_eq!(once, g);
        }
    }

    #[test]
    fn zero_rate_mutation_preserves_genes(seed in any::<u64>()) {
        let space = space(40);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_genome(&mut rng, &space, None);
        prop_assert!(mutate(&g, &mut rng, &MutationRates::ZERO, &space, None).same_genes(&g));
    }

    #[test]
    fn text_record_round_trips(g in arb_genome(), parents in prop::collection::vec(any::<u64>(), 0..3),
                               lr in 1e-6f64..1.0, momentum in 0.0f64..1.0) {
        let mut g = g;
        g.parent_ids = parents.into_iter().map(GenomeId).collect();
        g.learn.lr = lr;
        g.learn.momentum = momentum;
        let line = g.to_string();
        prop_assert!(!line.contains('\n'));
        prop_assert_eq!(line.parse::<Genome>().unwrap(), g);
    }
}
