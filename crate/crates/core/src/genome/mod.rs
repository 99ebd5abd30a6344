//! Linear-chain network genomes: feature layers (conv/pool), hidden dense
//! head layers and learning hyperparameters. A final 2-unit dense layer is
//! implied and never evolved.

mod ops;
mod prior;
mod text;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{output_dim, Conv2d, Dense, InputShape, Layer, MaxPool, Network, NnError, Scalar, CLASS_COUNT};

pub use ops::{crossover, mutate, random_genome, MutationRates};
pub use prior::{PriorError, ThroughputPrior};
pub use text::GenomeParseError;

pub const MAX_FEATURE_LAYERS: usize = 12;
pub const MAX_HEAD_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GenomeId(pub u64);

impl GenomeId {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        GenomeId(rng.gen())
    }
}

impl fmt::Display for GenomeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for GenomeId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u64::from_str_radix(s, 16).map(GenomeId)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGene {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PoolGene {
    pub size: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DenseGene {
    pub units: usize,
}

/// A feature-extractor gene. Dense genes live in [`Genome::head`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerGene {
    Conv(ConvGene),
    Pool(PoolGene),
}

impl LayerGene {
    /// Window size and stride.
    pub fn window(&self) -> (usize, usize) {
        match self {
            LayerGene::Conv(c) => (c.kernel, c.stride),
            LayerGene::Pool(p) => (p.size, p.stride),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnParams {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Genome {
    pub id: GenomeId,
    pub parent_ids: Vec<GenomeId>,
    pub features: Vec<LayerGene>,
    pub head: Vec<DenseGene>,
    pub learn: LearnParams,
}

impl Genome {
    /// Same layers and learning parameters, ignoring identity.
    pub fn same_genes(&self, other: &Genome) -> bool {
        self.features == other.features && self.head == other.head && self.learn == other.learn
    }

    pub fn conv_genes(&self) -> impl Iterator<Item = &ConvGene> {
        self.features.iter().filter_map(|g| match g {
            LayerGene::Conv(c) => Some(c),
            LayerGene::Pool(_) => None,
        })
    }
}

/// Value sets the sampler and mutation operators draw from.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub input_shape: InputShape,
    pub out_channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub pool_sizes: Vec<usize>,
    pub pool_strides: Vec<usize>,
    /// Inclusive range of hidden dense widths.
    pub dense_units: (usize, usize),
    pub batch_sizes: Vec<usize>,
    /// Inclusive log-uniform range for the initial learning rate.
    pub lr_range: (f64, f64),
    /// Half-open range `[lo, hi)` for momentum.
    pub momentum_range: (f64, f64),
    /// Feature count of a freshly sampled genome is uniform in `1..=this`.
    pub max_initial_features: usize,
    pub max_features: usize,
    pub max_head: usize,
    /// Chance that a sampled feature gene is a pool rather than a conv.
    pub pool_probability: f64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            input_shape: InputShape::default(),
            out_channels: vec![8, 16, 32, 64, 128, 256],
            kernels: (1..=7).collect(),
            strides: (1..=3).collect(),
            pool_sizes: vec![2, 3],
            pool_strides: (1..=3).collect(),
            dense_units: (16, 1024),
            batch_sizes: vec![16, 32, 64, 128, 256],
            lr_range: (1e-3, 1e-1),
            momentum_range: (0.0, 0.95),
            max_initial_features: 6,
            max_features: MAX_FEATURE_LAYERS,
            max_head: MAX_HEAD_LAYERS,
            pool_probability: 0.25,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), String> {
        let lists = [
            ("out_channels", &self.out_channels),
            ("kernels", &self.kernels),
            ("strides", &self.strides),
            ("pool_sizes", &self.pool_sizes),
            ("pool_strides", &self.pool_strides),
            ("batch_sizes", &self.batch_sizes),
        ];
        for (name, values) in lists {
            if values.is_empty() {
                return Err(format!("search.{name} is empty"));
            }
            if values.contains(&0) {
                return Err(format!("search.{name} contains 0"));
            }
        }
        let (lo, hi) = self.dense_units;
        if lo == 0 || lo > hi {
            return Err(format!("search.dense_units range {lo}..{hi} is empty"));
        }
        let (lo, hi) = self.lr_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(format!("search.lr range {lo}..{hi} is invalid"));
        }
        let (lo, hi) = self.momentum_range;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(format!("search.momentum range {lo}..{hi} is invalid"));
        }
        if self.max_initial_features == 0 || self.max_initial_features > self.max_features {
            return Err("search.max_initial_features must be in 1..=search.max_features".into());
        }
        if self.max_features == 0 || self.max_features > MAX_FEATURE_LAYERS {
            return Err(format!("search.max_features must be in 1..={MAX_FEATURE_LAYERS}"));
        }
        if self.max_head > MAX_HEAD_LAYERS {
            return Err(format!("search.max_head must be at most {MAX_HEAD_LAYERS}"));
        }
        if !(0.0..=1.0).contains(&self.pool_probability) {
            return Err("search.pool_probability must be in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Height,
    Width,
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dimension::Height => "height",
            Dimension::Width => "width",
        })
    }
}

/// First feature layer whose window does not fit its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("feature layer {layer}: window {window} exceeds input {dimension} {size}")]
pub struct ShapeError {
    pub layer: usize,
    pub dimension: Dimension,
    pub size: usize,
    pub window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Conv,
    Pool,
    Flatten,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEntry {
    pub kind: TraceKind,
    /// Output `(channels, rows, cols)`; dense and flatten outputs are `(units, 1, 1)`.
    pub shape: (usize, usize, usize),
}

pub type ShapeTrace = Vec<TraceEntry>;

/// Per-layer output shapes for a batch of one, including the flatten and
/// implicit final classifier.
pub fn validate_shapes(genome: &Genome, input: InputShape) -> Result<ShapeTrace, ShapeError> {
    let (mut c, mut h, mut w) = (input.c, input.h, input.w);
    let mut trace = Vec::with_capacity(genome.features.len() + genome.head.len() + 2);
    for (layer, gene) in genome.features.iter().enumerate() {
        let (k, s) = gene.window();
        let fail = |dimension, size| ShapeError {
            layer,
            dimension,
            size,
            window: k,
        };
        h = output_dim(h, k, s).ok_or_else(|| fail(Dimension::Height, h))?;
        w = output_dim(w, k, s).ok_or_else(|| fail(Dimension::Width, w))?;
        let kind = match gene {
            LayerGene::Conv(g) => {
                c = g.out_channels;
                TraceKind::Conv
            }
            LayerGene::Pool(_) => TraceKind::Pool,
        };
        trace.push(TraceEntry { kind, shape: (c, h, w) });
    }
    trace.push(TraceEntry {
        kind: TraceKind::Flatten,
        shape: (c * h * w, 1, 1),
    });
    for d in &genome.head {
        trace.push(TraceEntry {
            kind: TraceKind::Dense,
            shape: (d.units, 1, 1),
        });
    }
    trace.push(TraceEntry {
        kind: TraceKind::Dense,
        shape: (CLASS_COUNT, 1, 1),
    });
    Ok(trace)
}

/// Drops the first layer that fails shape validation until the genome is
/// valid, after truncating layer lists to their maximum lengths. Kernel and
/// stride values are never altered, so sampled values survive repair.
pub fn repair(genome: &Genome, input: InputShape) -> Genome {
    let mut g = genome.clone();
    g.features.truncate(MAX_FEATURE_LAYERS);
    g.head.truncate(MAX_HEAD_LAYERS);
    while let Err(e) = validate_shapes(&g, input) {
        g.features.remove(e.layer);
    }
    g
}

#[derive(Debug, thiserror::Error)]
pub enum InstantiateError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Network(#[from] NnError),
}

/// Builds the network a genome describes with seeded Kaiming-uniform weights:
/// each conv (followed by ReLU when flagged) or pool, then flatten, each
/// hidden dense followed by ReLU, then the 2-unit classifier.
pub fn instantiate<T: Scalar>(genome: &Genome, input: InputShape, seed: u64) -> Result<Network<T>, InstantiateError> {
    let trace = validate_shapes(genome, input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut channels = input.c;
    for gene in &genome.features {
        match gene {
            LayerGene::Conv(g) => {
                layers.push(Layer::Conv2d(Conv2d::kaiming(
                    channels,
                    g.out_channels,
                    g.kernel,
                    g.stride,
                    &mut rng,
                )?));
                if g.relu {
                    layers.push(Layer::Relu);
                }
                channels = g.out_channels;
            }
            LayerGene::Pool(g) => layers.push(Layer::MaxPool(MaxPool::new(g.size, g.stride)?)),
        }
    }
    layers.push(Layer::Flatten);
    let mut units = trace[genome.features.len()].shape.0;
    for d in &genome.head {
        layers.push(Layer::Dense(Dense::kaiming(units, d.units, &mut rng)?));
        layers.push(Layer::Relu);
        units = d.units;
    }
    layers.push(Layer::Dense(Dense::kaiming(units, CLASS_COUNT, &mut rng)?));
    Ok(Network::new(layers, input)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(out: usize, k: usize, s: usize) -> LayerGene {
        LayerGene::Conv(ConvGene {
            out_channels: out,
            kernel: k,
            stride: s,
            relu: true,
        })
    }

    pub(crate) fn genome(features: Vec<LayerGene>) -> Genome {
        Genome {
            id: GenomeId(1),
            parent_ids: Vec::new(),
            features,
            head: Vec::new(),
            learn: LearnParams {
                lr: 0.01,
                momentum: 0.9,
                batch_size: 32,
            },
        }
    }

    #[test]
    fn single_conv_k4_on_100_gives_97() {
        let t = validate_shapes(&genome(vec![conv(8, 4, 1)]), InputShape::default()).unwrap();
        assert_eq!(t[0].shape, (8, 97, 97));
        assert_eq!(t[1].shape, (8 * 97 * 97, 1, 1));
    }

    #[test]
    fn oversized_kernel_fails_at_layer_zero() {
        let err = validate_shapes(&genome(vec![conv(8, 101, 1)]), InputShape::default()).unwrap_err();
        assert_eq!(err.layer, 0);
        assert_eq!(err.size, 100);
        assert_eq!(err.window, 101);
    }

    #[test]
    fn empty_features_trace_is_flatten_then_classifier() {
        let t = validate_shapes(&genome(Vec::new()), InputShape::default()).unwrap();
        assert_eq!(
            t,
            vec![
                TraceEntry {
                    kind: TraceKind::Flatten,
                    shape: (30_000, 1, 1)
                },
                TraceEntry {
                    kind: TraceKind::Dense,
                    shape: (2, 1, 1)
                },
            ]
        );
    }

    #[test]
    fn width_failure_is_reported_for_wide_kernels_on_tall_inputs() {
        let err = validate_shapes(&genome(vec![conv(8, 5, 1)]), InputShape::new(1, 9, 4)).unwrap_err();
        assert_eq!(err.dimension, Dimension::Width);
    }

    #[test]
    fn repair_drops_second_stacked_wide_conv_on_8x8() {
        // 8 → floor((8−7)/3)+1 = 1, then a 7-wide window cannot fit 1.
        let input = InputShape::new(3, 8, 8);
        let g = genome(vec![conv(8, 7, 3), conv(8, 7, 3)]);
        let fixed = repair(&g, input);
        assert_eq!(fixed.features, vec![conv(8, 7, 3)]);
        assert_eq!(validate_shapes(&fixed, input).unwrap()[0].shape, (8, 1, 1));
        assert_eq!(repair(&fixed, input), fixed);
    }

    #[test]
    fn all_invalid_genome_repairs_to_empty_features() {
        let input = InputShape::new(3, 4, 4);
        let fixed = repair(&genome(vec![conv(8, 5, 1), conv(8, 6, 1)]), input);
        assert!(fixed.features.is_empty());
        assert!(validate_shapes(&fixed, input).is_ok());
    }

    #[test]
    fn instantiate_layer_count_and_param_count() {
        let mut g = genome(vec![
            conv(4, 3, 1),
            LayerGene::Pool(PoolGene { size: 2, stride: 2 }),
            LayerGene::Conv(ConvGene {
                out_channels: 2,
                kernel: 2,
                stride: 1,
                relu: false,
            }),
        ]);
        g.head.push(DenseGene { units: 5 });
        let input = InputShape::new(3, 10, 10);
        let net = instantiate::<f64>(&g, input, 7).unwrap();
        // 3 feature genes + 1 relu, flatten, 1 hidden dense + relu, classifier
        assert_eq!(net.layers().len(), 3 + 1 + 1 + 2 + 1);
        // conv 3→4 k3: 108+4; conv 4→2 k2: 32+2; 10→8→4→3, flatten 18; dense 18→5: 95; 5→2: 12
        assert_eq!(net.param_count(), 112 + 34 + 95 + 12);
        let again = instantiate::<f64>(&g, input, 7).unwrap();
        assert_eq!(net.checksum(), again.checksum());
        assert_ne!(net.checksum(), instantiate::<f64>(&g, input, 8).unwrap().checksum());
    }

    #[test]
    fn genome_id_round_trips_as_hex() {
        let id = GenomeId(0x00ab_cdef_0123_4567);
        assert_eq!(id.to_string(), "00abcdef01234567");
        assert_eq!("00abcdef01234567".parse::<GenomeId>().unwrap(), id);
    }
}
