use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    repair, ConvGene, DenseGene, Genome, GenomeId, LayerGene, LearnParams, PoolGene, SearchSpace, ThroughputPrior,
};

/// Independent per-child probabilities of each mutation operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutationRates {
    /// Resample one hyperparameter of one gene (layer or learning).
    pub perturb_hparam: f64,
    /// Insert a random feature gene.
    pub add_layer: f64,
    /// Delete a feature gene; never below one.
    pub remove_layer: f64,
    /// Scale the learning rate by a log-uniform factor in [1/3, 3].
    pub perturb_lr: f64,
}

impl MutationRates {
    pub const ZERO: MutationRates = MutationRates {
        perturb_hparam: 0.0,
        add_layer: 0.0,
        remove_layer: 0.0,
        perturb_lr: 0.0,
    };
    pub const ALWAYS: MutationRates = MutationRates {
        perturb_hparam: 1.0,
        add_layer: 1.0,
        remove_layer: 1.0,
        perturb_lr: 1.0,
    };

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("perturb_hparam", self.perturb_hparam),
            ("add_layer", self.add_layer),
            ("remove_layer", self.remove_layer),
            ("perturb_lr", self.perturb_lr),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("mutation.{name} = {p} is not a probability"));
            }
        }
        Ok(())
    }
}

impl Default for MutationRates {
    fn default() -> Self {
        Self {
            perturb_hparam: 0.6,
            add_layer: 0.2,
            remove_layer: 0.2,
            perturb_lr: 0.3,
        }
    }
}

const LR_MIN: f64 = 1e-5;
const LR_MAX: f64 = 1.0;

fn pick<R: Rng + ?Sized>(values: &[usize], rng: &mut R) -> usize {
    *values.choose(rng).expect("validated non-empty")
}

fn sample_out<R: Rng + ?Sized>(space: &SearchSpace, prior: Option<&ThroughputPrior>, rng: &mut R) -> usize {
    match prior {
        Some(p) => p.sample_out(&space.out_channels, rng),
        None => pick(&space.out_channels, rng),
    }
}

fn sample_kernel<R: Rng + ?Sized>(space: &SearchSpace, prior: Option<&ThroughputPrior>, rng: &mut R) -> usize {
    match prior {
        Some(p) => p.sample_kernel(&space.kernels, rng),
        None => pick(&space.kernels, rng),
    }
}

fn sample_stride<R: Rng + ?Sized>(space: &SearchSpace, prior: Option<&ThroughputPrior>, rng: &mut R) -> usize {
    match prior {
        Some(p) => p.sample_stride(&space.strides, rng),
        None => pick(&space.strides, rng),
    }
}

fn sample_conv<R: Rng + ?Sized>(space: &SearchSpace, prior: Option<&ThroughputPrior>, rng: &mut R) -> ConvGene {
    ConvGene {
        out_channels: sample_out(space, prior, rng),
        kernel: sample_kernel(space, prior, rng),
        stride: sample_stride(space, prior, rng),
        relu: rng.gen_bool(0.5),
    }
}

fn sample_pool<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> PoolGene {
    PoolGene {
        size: pick(&space.pool_sizes, rng),
        stride: pick(&space.pool_strides, rng),
    }
}

fn sample_feature<R: Rng + ?Sized>(space: &SearchSpace, prior: Option<&ThroughputPrior>, rng: &mut R) -> LayerGene {
    if rng.gen_bool(space.pool_probability) {
        LayerGene::Pool(sample_pool(space, rng))
    } else {
        LayerGene::Conv(sample_conv(space, prior, rng))
    }
}

fn sample_dense<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> DenseGene {
    DenseGene {
        units: rng.gen_range(space.dense_units.0..=space.dense_units.1),
    }
}

fn sample_lr<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> f64 {
    let (lo, hi) = space.lr_range;
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo.ln()..=hi.ln()).exp()
    }
}

/// A fresh genome drawn from `space`, conv hyperparameters optionally biased
/// by `prior`, repaired to a valid shape trace.
pub fn random_genome<R: Rng + ?Sized>(rng: &mut R, space: &SearchSpace, prior: Option<&ThroughputPrior>) -> Genome {
    let n_features = rng.gen_range(1..=space.max_initial_features);
    let features = (0..n_features).map(|_| sample_feature(space, prior, rng)).collect();
    let n_head = rng.gen_range(0..=space.max_head);
    let head = (0..n_head).map(|_| sample_dense(space, rng)).collect();
    let learn = LearnParams {
        lr: sample_lr(space, rng),
        momentum: rng.gen_range(space.momentum_range.0..space.momentum_range.1),
        batch_size: pick(&space.batch_sizes, rng),
    };
    let g = Genome {
        id: GenomeId::random(rng),
        parent_ids: Vec::new(),
        features,
        head,
        learn,
    };
    repair(&g, space.input_shape)
}

fn perturb_hparam<R: Rng + ?Sized>(g: &mut Genome, space: &SearchSpace, prior: Option<&ThroughputPrior>, rng: &mut R) {
    // one slot per gene plus one for the learning parameters
    let slot = rng.gen_range(0..=g.features.len() + g.head.len());
    if slot < g.features.len() {
        match &mut g.features[slot] {
            LayerGene::Conv(c) => match rng.gen_range(0..4) {
                0 => c.out_channels = sample_out(space, prior, rng),
                1 => c.kernel = sample_kernel(space, prior, rng),
                2 => c.stride = sample_stride(space, prior, rng),
                _ => c.relu = !c.relu,
            },
            LayerGene::Pool(p) => {
                if rng.gen_bool(0.5) {
                    p.size = pick(&space.pool_sizes, rng);
                } else {
                    p.stride = pick(&space.pool_strides, rng);
                }
            }
        }
    } else if slot < g.features.len() + g.head.len() {
        g.head[slot - g.features.len()] = sample_dense(space, rng);
    } else if rng.gen_bool(0.5) {
        g.learn.momentum = rng.gen_range(space.momentum_range.0..space.momentum_range.1);
    } else {
        g.learn.batch_size = pick(&space.batch_sizes, rng);
    }
}

/// A mutated copy of `parent`. Operators fire independently in the order
/// perturb_hparam, add_layer, remove_layer, perturb_lr; the child is repaired
/// and gets a fresh id with `parent_ids = [parent.id]`.
pub fn mutate<R: Rng + ?Sized>(
    parent: &Genome,
    rng: &mut R,
    rates: &MutationRates,
    space: &SearchSpace,
    prior: Option<&ThroughputPrior>,
) -> Genome {
    let mut g = parent.clone();
    if rng.gen_bool(rates.perturb_hparam) {
        perturb_hparam(&mut g, space, prior, rng);
    }
    if rng.gen_bool(rates.add_layer) && g.features.len() < space.max_features {
        let at = rng.gen_range(0..=g.features.len());
        g.features.insert(at, sample_feature(space, prior, rng));
    }
    if rng.gen_bool(rates.remove_layer) && g.features.len() > 1 {
        let at = rng.gen_range(0..g.features.len());
        g.features.remove(at);
    }
    if rng.gen_bool(rates.perturb_lr) {
        let factor = rng.gen_range((1.0f64 / 3.0).ln()..=3.0f64.ln()).exp();
        g.learn.lr = (g.learn.lr * factor).clamp(LR_MIN, LR_MAX);
    }
    g.id = GenomeId::random(rng);
    g.parent_ids = vec![parent.id];
    repair(&g, space.input_shape)
}

/// One-point crossover of the feature lists: `a[..i] ++ b[j..]` with
/// `i ∈ [0, |a|]` and `j ∈ [0, |b|)`, so the child keeps at least one of
/// `b`'s genes when `b` has any. The head comes with the tail from `b`;
/// learning parameters are taken from either parent by a fair coin each.
/// Parents with identical feature lists cut at the same point and so pass
/// their layers through unchanged.
pub fn crossover<R: Rng + ?Sized>(a: &Genome, b: &Genome, rng: &mut R, space: &SearchSpace) -> Genome {
    let i = rng.gen_range(0..=a.features.len());
    let j = if b.features.is_empty() {
        0
    } else {
        rng.gen_range(0..b.features.len())
    };
    crossover_at(a, b, i, j, rng, space)
}

pub(crate) fn crossover_at<R: Rng + ?Sized>(
    a: &Genome,
    b: &Genome,
    i: usize,
    j: usize,
    rng: &mut R,
    space: &SearchSpace,
) -> Genome {
    let j = if a.features == b.features { i } else { j };
    let mut features = a.features[..i].to_vec();
    features.extend_from_slice(&b.features[j.min(b.features.len())..]);
    let learn = LearnParams {
        lr: if rng.gen_bool(0.5) { a.learn.lr } else { b.learn.lr },
        momentum: if rng.gen_bool(0.5) {
            a.learn.momentum
        } else {
            b.learn.momentum
        },
        batch_size: if rng.gen_bool(0.5) {
            a.learn.batch_size
        } else {
            b.learn.batch_size
        },
    };
    let child = Genome {
        id: GenomeId::random(rng),
        parent_ids: vec![a.id, b.id],
        features,
        head: b.head.clone(),
        learn,
    };
    repair(&child, space.input_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::validate_shapes;
    use crate::nn::InputShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_space() -> SearchSpace {
        SearchSpace {
            input_shape: InputShape::new(3, 20, 20),
            ..SearchSpace::default()
        }
    }

    #[test]
    fn zero_rates_change_only_identity() {
        let space = small_space();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_genome(&mut rng, &space, None);
        let child = mutate(&g, &mut rng, &MutationRates::ZERO, &space, None);
        assert!(child.same_genes(&g));
        assert_ne!(child.id, g.id);
        assert_eq!(child.parent_ids, vec![g.id]);
    }

    #[test]
    fn remove_layer_respects_floor_of_one() {
        let space = small_space();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = random_genome(&mut rng, &space, None);
        g.features.truncate(1);
        let rates = MutationRates {
            remove_layer: 1.0,
            ..MutationRates::ZERO
        };
        for _ in 0..20 {
            assert_eq!(mutate(&g, &mut rng, &rates, &space, None).features, g.features);
        }
    }

    #[test]
    fn boundary_cut_takes_all_of_b() {
        let space = small_space();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_genome(&mut rng, &space, None);
        let mut b = random_genome(&mut rng, &space, None);
        while b.features == a.features {
            b = random_genome(&mut rng, &space, None);
        }
        let child = crossover_at(&a, &b, 0, 0, &mut rng, &space);
        assert_eq!(child.features, b.features);
        assert_eq!(child.parent_ids, vec![a.id, b.id]);
    }

    #[test]
    fn self_crossover_keeps_layers() {
        let space = small_space();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a = random_genome(&mut rng, &space, None);
            let child = crossover(&a, &a, &mut rng, &space);
            assert_eq!(child.features, a.features);
            assert_eq!(child.head, a.head);
            assert_eq!(child.learn, a.learn);
        }
    }

    #[test]
    fn lr_stays_clamped() {
        let space = small_space();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = random_genome(&mut rng, &space, None);
        let rates = MutationRates {
            perturb_lr: 1.0,
            ..MutationRates::ZERO
        };
        for _ in 0..500 {
            let before = g.learn.lr;
            g = mutate(&g, &mut rng, &rates, &space, None);
            let ratio = g.learn.lr / before;
            assert!((LR_MIN..=LR_MAX).contains(&g.learn.lr));
            assert!(
                ratio <= 3.0 + 1e-12 && (ratio >= 1.0 / 3.0 - 1e-12 || g.learn.lr == LR_MAX || g.learn.lr == LR_MIN)
            );
        }
    }

    #[test]
    fn random_genomes_are_valid_and_deterministic() {
        let space = small_space();
        for seed in 0..200 {
            let g = random_genome(&mut ChaCha8Rng::seed_from_u64(seed), &space, None);
            assert!(validate_shapes(&g, space.input_shape).is_ok());
            assert_eq!(g, random_genome(&mut ChaCha8Rng::seed_from_u64(seed), &space, None));
        }
    }
}
