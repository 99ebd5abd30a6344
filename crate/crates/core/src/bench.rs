//! Performance measurement: conv-layer throughput sweep and the prior built
//! from it, epoch-time distribution analysis, and weak scaling of the pool.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Subset;
use crate::evaluator::{train_short, EvalRecord, Evaluator, StubEvaluator, StubOutcome, TrainBudget};
use crate::genome::{random_genome, Genome, GenomeId, PriorError, SearchSpace, ThroughputPrior};
use crate::nn::{conv2d_backward, conv2d_forward, output_dim, Conv2d, Scalar, Shape4, Tensor4};
use crate::pool::{run_pool, Coordinator, PoolError, PoolOptions};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("grid: {0}")]
    Grid(String),
    #[error("{0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// Cross product of per-hyperparameter value lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepGrid {
    pub in_channels: Vec<usize>,
    pub out_channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    /// Square input sides.
    pub sizes: Vec<usize>,
}

impl Default for SweepGrid {
    /// 756 configurations on 32×32 inputs.
    fn default() -> Self {
        Self {
            in_channels: vec![3, 16, 32],
            out_channels: vec![8, 16, 32, 64, 128, 256],
            kernels: (1..=7).collect(),
            strides: vec![1, 2, 3],
            batch_sizes: vec![8, 16],
            sizes: vec![32],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub size: usize,
}

impl SweepGrid {
    /// Grid file: one `key = v1, v2, ...` line per hyperparameter, `#`
    /// comments. Keys: in_channels, out_channels, kernel, stride,
    /// batch_size, size. All keys are required.
    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let mut lists: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, values) = line
                .split_once('=')
                .ok_or_else(|| BenchError::Grid(format!("line {}: expected key = values", n + 1)))?;
            let key = key.trim();
            let known = ["in_channels", "out_channels", "kernel", "stride", "batch_size", "size"];
            let Some(&key) = known.iter().find(|k| **k == key) else {
                return Err(BenchError::Grid(format!("line {}: unknown key '{key}'", n + 1)));
            };
            let parsed = values
                .split(',')
                .map(|v| {
                    v.trim().parse::<usize>().ok().filter(|&x| x > 0).ok_or_else(|| {
                        BenchError::Grid(format!("line {}: '{}' is not a positive integer", n + 1, v.trim()))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if lists.insert(key, parsed).is_some() {
                return Err(BenchError::Grid(format!("line {}: duplicate key '{key}'", n + 1)));
            }
        }
        let mut take = |k: &str| {
            lists
                .remove(k)
                .ok_or_else(|| BenchError::Grid(format!("missing key '{k}'")))
        };
        Ok(Self {
            in_channels: take("in_channels")?,
            out_channels: take("out_channels")?,
            kernels: take("kernel")?,
            strides: take("stride")?,
            batch_sizes: take("batch_size")?,
            sizes: take("size")?,
        })
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        format!(
            "in_channels = {}\nout_channels = {}\nkernel = {}\nstride = {}\nbatch_size = {}\nsize = {}\n",
            join(&self.in_channels),
            join(&self.out_channels),
            join(&self.kernels),
            join(&self.strides),
            join(&self.batch_sizes),
            join(&self.sizes)
        )
    }

    pub fn configs(&self) -> Vec<ConvConfig> {
        let mut out = Vec::new();
        for &size in &self.sizes {
            for &in_channels in &self.in_channels {
                for &out_channels in &self.out_channels {
                    for &kernel in &self.kernels {
                        for &stride in &self.strides {
                            for &batch_size in &self.batch_sizes {
                                out.push(ConvConfig {
                                    in_channels,
                                    out_channels,
                                    kernel,
                                    stride,
                                    batch_size,
                                    size,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Forward FLOPs of one conv layer for one patch, or `None` when the output
/// would be empty.
pub fn conv_flops(c: &ConvConfig) -> Option<u64> {
    let ho = output_dim(c.size, c.kernel, c.stride)?;
    let wo = output_dim(c.size, c.kernel, c.stride)?;
    Some(2 * (c.kernel * c.kernel * c.in_channels * c.out_channels * ho * wo) as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub height: usize,
    pub width: usize,
    pub median_forward_backward_s: f64,
    pub flops_per_layer: u64,
    pub flops_per_s: f64,
}

pub const SWEEP_CSV_HEADER: &str = "in_channels,out_channels,kernel,stride,batch_size,height,width,median_forward_backward_s,flops_per_layer,flops_per_s";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSkip {
    pub config: ConvConfig,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub skipped: Vec<SweepSkip>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median wall time of one forward plus backward pass of a single conv
/// layer on random data, after one untimed pass.
pub fn time_conv(c: &ConvConfig, reps: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = Conv2d::<f32>::kaiming(c.in_channels, c.out_channels, c.kernel, c.stride, &mut rng)
        .map_err(|e| e.to_string())?;
    let in_shape = Shape4::new(c.batch_size, c.in_channels, c.size, c.size);
    let out_shape = layer.output_shape(in_shape).map_err(|e| e.to_string())?;
    let random = |shape: Shape4, rng: &mut ChaCha8Rng| {
        let data = (0..shape.len())
            .map(|_| f32::from_f64_lossy(rng.gen_range(-1.0..1.0)))
            .collect();
        Tensor4::from_vec(shape, data).expect("length matches shape")
    };
    let input = random(in_shape, &mut rng);
    let grad = random(out_shape, &mut rng);
    let pass = || -> Result<(), String> {
        let out = conv2d_forward(&input, &layer).map_err(|e| e.to_string())?;
        std::hint::black_box(out);
        let g = conv2d_backward(&input, &layer, &grad).map_err(|e| e.to_string())?;
        std::hint::black_box(g);
        Ok(())
    };
    pass()?;
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        pass()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    Ok(median(samples))
}

/// Times every configuration of `grid` in order; collapsing shapes are
/// skipped with a reason.
pub fn sweep_conv(grid: &SweepGrid, reps: usize, seed: u64) -> Result<SweepResult, BenchError> {
    if reps < 3 {
        return Err(BenchError::Invalid(format!("sweep needs reps >= 3, got {reps}")));
    }
    let mut result = SweepResult::default();
    for (i, c) in grid.configs().into_iter().enumerate() {
        let Some(flops) = conv_flops(&c) else {
            result.skipped.push(SweepSkip {
                config: c,
                reason: format!("kernel {} does not fit a {}-pixel input", c.kernel, c.size),
            });
            continue;
        };
        let t = time_conv(&c, reps, seed.wrapping_add(i as u64)).map_err(BenchError::Invalid)?;
        result.rows.push(SweepRow {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            stride: c.stride,
            batch_size: c.batch_size,
            height: c.size,
            width: c.size,
            median_forward_backward_s: t,
            flops_per_layer: flops,
            flops_per_s: flops as f64 * c.batch_size as f64 / t,
        });
    }
    Ok(result)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(SWEEP_CSV_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: Read>(input: R) -> Result<Vec<SweepRow>, BenchError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != SWEEP_CSV_HEADER {
        return Err(BenchError::Invalid(format!(
            "unexpected sweep header '{}'",
            header.join(",")
        )));
    }
    Ok(r.deserialize().collect::<Result<Vec<SweepRow>, _>>()?)
}

/// The `k` rows with the highest FLOP/s; equal rates keep input order.
pub fn top_k_by_throughput(rows: &[SweepRow], k: usize) -> Vec<SweepRow> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| b.flops_per_s.total_cmp(&a.flops_per_s));
    sorted.truncate(k);
    sorted
}

/// Prior whose weight for each hyperparameter value is its count among the
/// top-`k` rows plus one, over the values that occur there.
pub fn build_prior(rows: &[SweepRow], k: usize, beta: f64) -> Result<ThroughputPrior, BenchError> {
    if k == 0 || k > rows.len() {
        return Err(BenchError::Invalid(format!("k = {k} must be in 1..={}", rows.len())));
    }
    let top = top_k_by_throughput(rows, k);
    let counts = |f: fn(&SweepRow) -> usize| {
        let mut m: BTreeMap<usize, f64> = BTreeMap::new();
        for r in &top {
            *m.entry(f(r)).or_insert(1.0) += 1.0;
        }
        m.into_iter().collect::<Vec<_>>()
    };
    Ok(ThroughputPrior::new(
        counts(|r| r.out_channels),
        counts(|r| r.kernel),
        counts(|r| r.stride),
        beta,
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub samples: usize,
    pub histogram: Vec<HistogramBin>,
    pub modes: usize,
    pub mode_centers: Vec<f64>,
    /// Distance between the two 2-means centers over the sum of the
    /// clusters' standard deviations.
    pub separation_stat: f64,
}

/// Threshold on `separation_stat` above which two modes are reported.
pub const SEPARATION_THRESHOLD: f64 = 2.0;
pub const MIN_TIMING_SAMPLES: usize = 30;

fn histogram(sorted: &[f64]) -> Vec<HistogramBin> {
    let n = sorted.len();
    let bins = ((n as f64).sqrt().ceil() as usize).clamp(5, 50);
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &x in sorted {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lo: lo + i as f64 * width,
            hi: lo + (i + 1) as f64 * width,
            count,
        })
        .collect()
}

/// Histogram plus a 1-D 2-means split (exact: every cut of the sorted
/// samples is tried). Two modes are reported when the separation statistic
/// exceeds [`SEPARATION_THRESHOLD`].
pub fn timing_distribution(samples: &[f64]) -> Result<TimingReport, BenchError> {
    if samples.len() < MIN_TIMING_SAMPLES {
        return Err(BenchError::Invalid(format!(
            "timing analysis needs at least {MIN_TIMING_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if let Some(bad) = samples.iter().find(|x| !x.is_finite()) {
        return Err(BenchError::Invalid(format!("non-finite timing sample {bad}")));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let mean = s.iter().sum::<f64>() / n as f64;
    // prefix sums of centered values for the within-cluster sums of squares
    let mut p1 = vec![0.0; n + 1];
    let mut p2 = vec![0.0; n + 1];
    for (i, &x) in s.iter().enumerate() {
        let d = x - mean;
        p1[i + 1] = p1[i] + d;
        p2[i + 1] = p2[i] + d * d;
    }
    let sse = |a: usize, b: usize| {
        let m = (b - a) as f64;
        let s1 = p1[b] - p1[a];
        (p2[b] - p2[a] - s1 * s1 / m).max(0.0)
    };
    let mut best = (f64::INFINITY, 1);
    for cut in 1..n {
        let cost = sse(0, cut) + sse(cut, n);
        if cost < best.0 {
            best = (cost, cut);
        }
    }
    let cut = best.1;
    let c1 = mean + (p1[cut] - p1[0]) / cut as f64;
    let c2 = mean + (p1[n] - p1[cut]) / (n - cut) as f64;
    let sd1 = (sse(0, cut) / cut as f64).sqrt();
    let sd2 = (sse(cut, n) / (n - cut) as f64).sqrt();
    let separation_stat = if sd1 + sd2 > 0.0 {
        (c2 - c1) / (sd1 + sd2)
    } else if c2 > c1 {
        f64::INFINITY
    } else {
        0.0
    };
    let two = separation_stat > SEPARATION_THRESHOLD;
    Ok(TimingReport {
        samples: n,
        histogram: histogram(&s),
        modes: if two { 2 } else { 1 },
        mode_centers: if two { vec![c1, c2] } else { vec![mean] },
        separation_stat,
    })
}

pub fn write_histogram_csv<W: Write>(report: &TimingReport, out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for b in &report.histogram {
        w.serialize(b)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub worker_id: usize,
    pub epoch_time_s: f64,
    pub genome_id: GenomeId,
    pub lr: f64,
    pub momentum: f64,
}

/// Epoch times of one fixed topology trained with `count` random learning
/// rates and momenta, split across `workers` threads.
pub fn epoch_times(
    base: &Genome,
    train: &Subset,
    count: usize,
    workers: usize,
    seed: u64,
) -> Result<Vec<TimingSample>, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variants: Vec<Genome> = (0..count)
        .map(|_| {
            let mut g = base.clone();
            g.learn.lr = (rng.gen_range(1e-3f64.ln()..1e-1f64.ln())).exp();
            g.learn.momentum = rng.gen_range(0.0..0.95);
            g
        })
        .collect();
    let budget = TrainBudget {
        epochs: 1,
        max_batches_per_epoch: None,
    };
    let workers = workers.clamp(1, count.max(1));
    let results = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let mine: Vec<&Genome> = variants.iter().skip(w).step_by(workers).collect();
                scope.spawn(move || {
                    mine.into_iter()
                        .map(|g| {
                            let t = Instant::now();
                            // a diverging variant still took the time it took
                            let _ = train_short::<f32>(g, train, &budget, seed);
                            TimingSample {
                                worker_id: w,
                                epoch_time_s: t.elapsed().as_secs_f64(),
                                genome_id: g.id,
                                lr: g.learn.lr,
                                momentum: g.learn.momentum,
                            }
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("timing worker"))
            .collect::<Vec<_>>()
    });
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub workers: usize,
    pub evaluations: usize,
    pub wall_s: f64,
    /// Evaluations per second.
    pub throughput: f64,
    /// Throughput over `workers` times the one-worker throughput.
    pub efficiency: f64,
    /// Throughput if every evaluation took the fastest observed time.
    pub upper_bound: f64,
    /// Throughput if every evaluation took the slowest observed time.
    pub lower_bound: f64,
    pub idle_fraction: f64,
}

/// Issues a fixed list of genomes and keeps the records.
pub struct FixedWork {
    queue: std::collections::VecDeque<Genome>,
    pub records: Vec<EvalRecord>,
}

impl FixedWork {
    pub fn new(genomes: Vec<Genome>) -> Self {
        Self {
            queue: genomes.into(),
            records: Vec::new(),
        }
    }
}

impl Coordinator for FixedWork {
    fn next_work(&mut self, _worker_id: usize) -> Option<Genome> {
        self.queue.pop_front()
    }

    fn accept(&mut self, record: EvalRecord) -> Result<(), String> {
        self.records.push(record);
        Ok(())
    }
}

/// Runs `workers · per_worker` evaluations for each worker count and
/// reports throughput, efficiency against the first count and the
/// best/worst-case throughput bounds.
pub fn weak_scaling(
    worker_counts: &[usize],
    per_worker: usize,
    evaluator: Arc<dyn Evaluator>,
    space: &SearchSpace,
    seed: u64,
) -> Result<Vec<ScalingRow>, BenchError> {
    if worker_counts.is_empty() || worker_counts.windows(2).any(|w| w[0] >= w[1]) || worker_counts[0] == 0 {
        return Err(BenchError::Invalid(
            "worker counts must be positive and ascending".into(),
        ));
    }
    if per_worker == 0 {
        return Err(BenchError::Invalid("networks per worker must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<ScalingRow> = Vec::new();
    for &w in worker_counts {
        let genomes: Vec<Genome> = (0..w * per_worker)
            .map(|_| random_genome(&mut rng, space, None))
            .collect();
        let mut work = FixedWork::new(genomes);
        let report = run_pool(&mut work, Arc::clone(&evaluator), &PoolOptions::new(w))?;
        let durations: Vec<f64> = report
            .workers
            .iter()
            .flat_map(|s| s.durations_s.iter().copied())
            .collect();
        let fastest = durations.iter().copied().fold(f64::INFINITY, f64::min);
        let slowest = durations.iter().copied().fold(0.0, f64::max);
        let throughput = report.outcomes as f64 / report.wall_time_s;
        let base = rows
            .first()
            .map_or(throughput / w as f64, |r| r.throughput / r.workers as f64);
        rows.push(ScalingRow {
            workers: w,
            evaluations: report.outcomes,
            wall_s: report.wall_time_s,
            throughput,
            efficiency: throughput / (w as f64 * base),
            upper_bound: w as f64 / fastest,
            lower_bound: w as f64 / slowest,
            idle_fraction: report.idle_fraction().aggregate,
        });
    }
    Ok(rows)
}

pub fn write_scaling_csv<W: Write>(rows: &[ScalingRow], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Deterministic pseudo-random value in `[0, 1)` from a genome id.
pub fn unit_hash(id: GenomeId) -> f64 {
    let mut z = id.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Evaluator that sleeps a per-genome duration uniform in `[lo, hi]` and
/// reports a constant score.
pub fn sleep_stub(lo: Duration, hi: Duration) -> StubEvaluator<impl Fn(&Genome) -> StubOutcome + Send + Sync> {
    StubEvaluator::new(move |g: &Genome| StubOutcome {
        val_f1: 0.5,
        cost: 1.0,
        sleep: lo + (hi.saturating_sub(lo)).mul_f64(unit_hash(g.id)),
        fail: false,
    })
}
