//! Scoring a genome: short training run, validation F1/AUC, FLOP and
//! parameter counts, optional latency measurement.
//!
//! FLOPs per patch: conv `2·k²·c_in·c_out·h_out·w_out`, dense `2·in·out`,
//! max-pool and ReLU one per output element, flatten free; biases ignored.

use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Splits, Subset};
use crate::fitness::{rescore, ObjectiveConfig, ObjectiveKind};
use crate::genome::{
    instantiate, random_genome, validate_shapes, Genome, GenomeId, InstantiateError, LayerGene, SearchSpace, TraceKind,
};
use crate::metrics::{auc_roc, f1_score, Confusion};
use crate::nn::{grad_check, GradCheckReport, InputShape, Layer, Network, Precision, Scalar, Sgd, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStatus {
    Ok,
    Failed,
    TimedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_s_per_batch: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub reps: usize,
    pub batch_size: usize,
    pub patches_per_s: f64,
}

/// Serializes non-finite floats as `null` and reads `null` back as `−∞`,
/// the failed-fitness sentinel.
pub(crate) mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

/// Outcome of one evaluation; one JSON line in the evolution log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub genome_id: GenomeId,
    pub status: EvalStatus,
    /// Why the evaluation failed; empty on success.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub failure: String,
    pub val_f1: f64,
    pub val_auc: f64,
    pub train_time_s: f64,
    pub latency: Option<LatencyStats>,
    pub flops_inference: u64,
    pub params: u64,
    /// Normalized cost objective in [0, 1].
    pub objective_m: f64,
    #[serde(with = "finite_or_null")]
    pub fitness: f64,
    pub worker_id: usize,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl EvalRecord {
    pub fn failed(genome_id: GenomeId, worker_id: usize, reason: String) -> Self {
        let now = unix_now();
        Self {
            genome_id,
            status: EvalStatus::Failed,
            failure: reason,
            val_f1: 0.0,
            val_auc: 0.0,
            train_time_s: 0.0,
            latency: None,
            flops_inference: 0,
            params: 0,
            objective_m: 0.0,
            fitness: f64::NEG_INFINITY,
            worker_id,
            started_unix_s: now,
            finished_unix_s: now,
        }
    }

    pub fn timed_out(genome_id: GenomeId, worker_id: usize, after: Duration) -> Self {
        let mut r = Self::failed(
            genome_id,
            worker_id,
            format!("no result after {:.3} s", after.as_secs_f64()),
        );
        r.status = EvalStatus::TimedOut;
        r
    }

    pub fn is_ok(&self) -> bool {
        self.status == EvalStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalFailure {
    #[error("shape: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("{0}")]
    Invalid(String),
}

impl From<InstantiateError> for EvalFailure {
    fn from(e: InstantiateError) -> Self {
        EvalFailure::Shape(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainBudget {
    pub epochs: usize,
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainBudget {
    fn default() -> Self {
        Self {
            epochs: 2,
            max_batches_per_epoch: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyConfig {
    pub batch_size: usize,
    pub reps: usize,
    pub warmup: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            reps: 5,
            warmup: 1,
        }
    }
}

impl LatencyConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.reps < 3 || self.warmup < 1 || self.batch_size == 0 {
            return Err(format!(
                "latency needs reps >= 3, warmup >= 1 and batch_size >= 1, got reps={} warmup={} batch_size={}",
                self.reps, self.warmup, self.batch_size
            ));
        }
        Ok(())
    }
}

pub fn count_params<T: Scalar>(network: &Network<T>) -> u64 {
    network.param_count() as u64
}

/// FLOPs of one layer for a single patch producing `output`.
pub fn layer_flops<T: Scalar>(layer: &Layer<T>, output: Shape4) -> u64 {
    let out_elems = output.item_len() as u64;
    match layer {
        Layer::Conv2d(c) => 2 * (c.kernel * c.kernel * c.in_channels) as u64 * out_elems,
        Layer::Dense(d) => 2 * (d.in_units * d.out_units) as u64,
        Layer::MaxPool(_) | Layer::Relu => out_elems,
        Layer::Flatten => 0,
    }
}

/// Inference FLOPs for one patch at the network's input shape.
pub fn count_flops_inference<T: Scalar>(network: &Network<T>) -> u64 {
    let trace = network.shape_trace().expect("network shapes validated at construction");
    network
        .layers()
        .iter()
        .zip(trace)
        .map(|(layer, out)| layer_flops(layer, out))
        .sum()
}

/// FLOPs and parameter count of the network `genome` instantiates, computed
/// from the shape trace without building it.
pub fn genome_cost(genome: &Genome, input: InputShape) -> Result<(u64, u64), EvalFailure> {
    let trace = validate_shapes(genome, input).map_err(|e| EvalFailure::Shape(e.to_string()))?;
    let (mut flops, mut params) = (0u64, 0u64);
    let mut prev = (input.c, input.h, input.w);
    for (i, entry) in trace.iter().enumerate() {
        let (c, h, w) = entry.shape;
        let out = (c * h * w) as u64;
        match entry.kind {
            TraceKind::Conv => {
                let LayerGene::Conv(g) = &genome.features[i] else {
                    unreachable!("trace entry {i} is a conv")
                };
                flops += 2 * (g.kernel * g.kernel * prev.0) as u64 * out;
                params += (g.kernel * g.kernel * prev.0 * c + c) as u64;
                if g.relu {
                    flops += out;
                }
            }
            TraceKind::Pool => flops += out,
            TraceKind::Flatten => {}
            TraceKind::Dense => {
                let fan_in = prev.0 * prev.1 * prev.2;
                flops += 2 * (fan_in * c) as u64;
                params += (fan_in * c + c) as u64;
                // every head layer but the 2-way output is followed by a ReLU
                if i + 1 < trace.len() {
                    flops += c as u64;
                }
            }
        }
        prev = (c, h, w);
    }
    Ok((flops, params))
}

pub struct Trained<T> {
    pub network: Network<T>,
    pub train_time_s: f64,
    pub steps: usize,
    pub final_loss: f64,
}

/// Minibatch momentum SGD for `budget.epochs` passes over a seeded shuffle
/// of `train`, batch size from the genome; the last partial batch is kept.
pub fn train_short<T: Scalar>(
    genome: &Genome,
    train: &Subset,
    budget: &TrainBudget,
    seed: u64,
) -> Result<Trained<T>, EvalFailure> {
    if train.is_empty() {
        return Err(EvalFailure::Invalid("empty training set".into()));
    }
    if budget.epochs == 0 {
        return Err(EvalFailure::Invalid("training budget needs at least one epoch".into()));
    }
    let start = Instant::now();
    let input = train.set().shape();
    let mut network = instantiate::<T>(genome, input, seed)?;
    let mut sgd =
        Sgd::<T>::new(genome.learn.lr, genome.learn.momentum).map_err(|e| EvalFailure::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_5b0f_f1e5);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = 0;
    let mut final_loss = f64::NAN;
    for epoch in 0..budget.epochs {
        order.shuffle(&mut rng);
        let limit = budget.max_batches_per_epoch.unwrap_or(usize::MAX);
        for (batch, chunk) in order.chunks(genome.learn.batch_size.max(1)).take(limit).enumerate() {
            let (x, y) = train.batch::<T>(chunk);
            let loss = sgd
                .train_batch(&mut network, &x, &y)
                .map_err(|e| EvalFailure::Shape(e.to_string()))?
                .to_f64_lossy();
            if !loss.is_finite() {
                return Err(EvalFailure::NonFiniteLoss { epoch, batch });
            }
            final_loss = loss;
            steps += 1;
        }
    }
    if network.params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(EvalFailure::NonFiniteLoss {
            epoch: budget.epochs - 1,
            batch: steps,
        });
    }
    Ok(Trained {
        network,
        train_time_s: start.elapsed().as_secs_f64(),
        steps,
        final_loss,
    })
}

/// Positive-class probabilities for every member of `set`, in order.
pub fn predict_subset<T: Scalar>(
    network: &Network<T>,
    set: &Subset,
    batch_size: usize,
) -> Result<Vec<f64>, EvalFailure> {
    let positions: Vec<usize> = (0..set.len()).collect();
    let mut scores = Vec::with_capacity(set.len());
    for chunk in positions.chunks(batch_size.max(1)) {
        let (x, _) = set.batch::<T>(chunk);
        let s = network
            .predict_scores(&x)
            .map_err(|e| EvalFailure::Shape(e.to_string()))?;
        scores.extend(s.into_iter().map(Scalar::to_f64_lossy));
    }
    Ok(scores)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Summary of per-batch timings; order of `samples` does not matter.
pub fn latency_stats(samples: &[f64], batch_size: usize) -> LatencyStats {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let med = median(&s);
    LatencyStats {
        median_s_per_batch: med,
        min_s: s[0],
        max_s: s[s.len() - 1],
        reps: s.len(),
        batch_size,
        // a zero median is below timer resolution; keep the rate finite so
        // the record survives JSON
        patches_per_s: if med > 0.0 { batch_size as f64 / med } else { f64::MAX },
    }
}

/// Times `config.reps` forward passes of a fixed random batch after
/// `config.warmup` untimed passes.
pub fn measure_latency<T: Scalar>(
    network: &Network<T>,
    config: &LatencyConfig,
    seed: u64,
) -> Result<LatencyStats, EvalFailure> {
    config.validate().map_err(EvalFailure::Invalid)?;
    let shape = network.input_shape().batch(config.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.len())
        .map(|_| T::from_f64_lossy(rng.gen_range(0.0..1.0)))
        .collect();
    let batch = Tensor4::from_vec(shape, data).map_err(|e| EvalFailure::Shape(e.to_string()))?;
    let run = |n: &Network<T>| n.forward(&batch).map_err(|e| EvalFailure::Shape(e.to_string()));
    for _ in 0..config.warmup {
        run(network)?;
    }
    let mut samples = Vec::with_capacity(config.reps);
    for _ in 0..config.reps {
        let t = Instant::now();
        std::hint::black_box(run(network)?);
        samples.push(t.elapsed().as_secs_f64());
    }
    Ok(latency_stats(&samples, config.batch_size))
}

/// Everything `evaluate` needs besides the genome and data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub budget: TrainBudget,
    pub latency: LatencyConfig,
    pub precision: Precision,
    /// Inference batch size for validation scoring.
    pub predict_batch: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            budget: TrainBudget::default(),
            latency: LatencyConfig::default(),
            precision: Precision::F32,
            predict_batch: 128,
        }
    }
}

/// Per-genome seed so results do not depend on which worker ran it.
pub fn genome_seed(run_seed: u64, id: GenomeId) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = run_seed ^ id.0.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn evaluate_typed<T: Scalar>(
    genome: &Genome,
    splits: &Splits,
    settings: &EvalSettings,
    kind: ObjectiveKind,
    seed: u64,
    record: &mut EvalRecord,
) -> Result<(), EvalFailure> {
    let trained = train_short::<T>(genome, &splits.train, &settings.budget, seed)?;
    let scores = predict_subset(&trained.network, &splits.val, settings.predict_batch)?;
    let labels = splits.val.labels();
    record.val_f1 = f1_score(&Confusion::from_scores(&scores, &labels, 0.5)).value;
    record.val_auc = auc_roc(&scores, &labels).unwrap_or(0.5);
    record.train_time_s = trained.train_time_s;
    record.flops_inference = count_flops_inference(&trained.network);
    record.params = count_params(&trained.network);
    if kind != ObjectiveKind::FlopProxy {
        record.latency = Some(measure_latency(&trained.network, &settings.latency, seed)?);
    }
    Ok(())
}

/// Trains and measures `genome`, then scores it under `objective`. Failures
/// become records with fitness `−∞`; they never abort the caller.
pub fn evaluate(
    genome: &Genome,
    splits: &Splits,
    settings: &EvalSettings,
    objective: &ObjectiveConfig,
    seed: u64,
    worker_id: usize,
) -> EvalRecord {
    let started = unix_now();
    let mut record = EvalRecord::failed(genome.id, worker_id, String::new());
    record.status = EvalStatus::Ok;
    record.started_unix_s = started;
    let outcome = match settings.precision {
        Precision::F32 => evaluate_typed::<f32>(genome, splits, settings, objective.kind, seed, &mut record),
        Precision::F64 => evaluate_typed::<f64>(genome, splits, settings, objective.kind, seed, &mut record),
    };
    if let Err(e) = outcome {
        record = EvalRecord::failed(genome.id, worker_id, e.to_string());
        record.started_unix_s = started;
    }
    rescore(&mut record, objective);
    record.finished_unix_s = unix_now();
    record
}

/// Work a pool worker performs for one genome. Returned records are
/// rescored by the master, so implementations may score with any config.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, genome: &Genome, worker_id: usize) -> EvalRecord;
}

/// Real training evaluator over shared data splits.
#[derive(Debug, Clone)]
pub struct TrainingEvaluator {
    pub splits: Splits,
    pub settings: EvalSettings,
    pub objective: ObjectiveConfig,
    pub run_seed: u64,
}

impl Evaluator for TrainingEvaluator {
    fn evaluate(&self, genome: &Genome, worker_id: usize) -> EvalRecord {
        evaluate(
            genome,
            &self.splits,
            &self.settings,
            &self.objective,
            genome_seed(self.run_seed, genome.id),
            worker_id,
        )
    }
}

/// What a stub evaluation reports for a genome.
#[derive(Debug, Clone, PartialEq)]
pub struct StubOutcome {
    pub val_f1: f64,
    /// Stored as `flops_inference` (rounded) and as the latency median.
    pub cost: f64,
    pub sleep: Duration,
    pub fail: bool,
}

/// Evaluator backed by a closure, for scheduler and search tests.
pub struct StubEvaluator<F> {
    f: F,
}

impl<F> StubEvaluator<F>
where
    F: Fn(&Genome) -> StubOutcome + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F> Evaluator for StubEvaluator<F>
where
    F: Fn(&Genome) -> StubOutcome + Send + Sync,
{
    fn evaluate(&self, genome: &Genome, worker_id: usize) -> EvalRecord {
        let started = unix_now();
        let out = (self.f)(genome);
        if !out.sleep.is_zero() {
            std::thread::sleep(out.sleep);
        }
        if out.fail {
            return EvalRecord::failed(genome.id, worker_id, "stub failure".into());
        }
        let mut record = EvalRecord::failed(genome.id, worker_id, String::new());
        record.status = EvalStatus::Ok;
        record.val_f1 = out.val_f1;
        record.val_auc = out.val_f1;
        record.flops_inference = out.cost.round().max(0.0) as u64;
        record.latency = Some(latency_stats(&[out.cost; 3], 1));
        record.train_time_s = out.sleep.as_secs_f64();
        record.started_unix_s = started;
        record.finished_unix_s = unix_now();
        rescore(&mut record, &ObjectiveConfig::none());
        record
    }
}

/// One gradient check of a network instantiated from a random genome.
#[derive(Debug, Clone)]
pub struct GenomeGradCheck {
    pub genome: Genome,
    pub report: GradCheckReport,
}

/// Small genome space for gradient checks: every parameter is probed, so
/// networks are kept to a few hundred weights.
pub fn grad_check_space(input: InputShape) -> SearchSpace {
    SearchSpace {
        input_shape: input,
        out_channels: vec![1, 2, 3, 4],
        kernels: vec![1, 2, 3],
        strides: vec![1, 2],
        pool_sizes: vec![2],
        pool_strides: vec![1, 2],
        dense_units: (2, 6),
        max_initial_features: 3,
        max_head: 1,
        ..SearchSpace::default()
    }
}

/// Checks backpropagation on `count` networks built from random genomes,
/// each on a random batch of one to three patches, in f64.
pub fn grad_check_genomes(count: usize, seed: u64, epsilon: f64) -> Result<Vec<GenomeGradCheck>, EvalFailure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let input = InputShape::new(rng.gen_range(1..=3), rng.gen_range(6..=10), rng.gen_range(6..=10));
        let genome = random_genome(&mut rng, &grad_check_space(input), None);
        let net = instantiate::<f64>(&genome, input, rng.gen())?;
        let n = rng.gen_range(1..=3);
        let shape = input.batch(n);
        let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Tensor4::from_vec(shape, data).map_err(|e| EvalFailure::Shape(e.to_string()))?;
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let report = grad_check(&net, &batch, &labels, epsilon).map_err(|e| EvalFailure::Invalid(e.to_string()))?;
        out.push(GenomeGradCheck { genome, report });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2d, Dense, Matrix};

    #[test]
    fn dense_only_counts() {
        let d = Dense::new(Matrix::<f64>::zeros(2, 10), vec![0.0; 2]).unwrap();
        let net = Network::new(vec![Layer::Flatten, Layer::Dense(d)], InputShape::new(10, 1, 1)).unwrap();
        assert_eq!(count_params(&net), 22);
        assert_eq!(count_flops_inference(&net), 40);
        let d = Dense::new(Matrix::<f64>::zeros(2, 100), vec![0.0; 2]).unwrap();
        let net = Network::new(vec![Layer::Flatten, Layer::Dense(d)], InputShape::new(100, 1, 1)).unwrap();
        assert_eq!(count_flops_inference(&net), 400);
    }

    #[test]
    fn conv_3_to_8_k4_on_100() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f32>::kaiming(3, 8, 4, 1, &mut rng).unwrap();
        let out = conv.output_shape(InputShape::default().batch(1)).unwrap();
        assert_eq!(layer_flops(&Layer::Conv2d(conv), out), 2 * 16 * 3 * 8 * 97 * 97);
        assert_eq!(2 * 16 * 3 * 8 * 97 * 97, 7_226_112);
        let one = Conv2d::<f32>::kaiming(1, 1, 1, 1, &mut rng).unwrap();
        assert_eq!(one.weights.data().len() + one.bias.len(), 2);
    }

    #[test]
    fn latency_median_ignores_order() {
        let a = latency_stats(&[0.3, 0.1, 0.2, 0.5], 8);
        let b = latency_stats(&[0.5, 0.2, 0.3, 0.1], 8);
        assert_eq!(a, b);
        assert!((a.median_s_per_batch - 0.25).abs() < 1e-15);
        assert_eq!(a.patches_per_s, 8.0 / a.median_s_per_batch);
    }

    #[test]
    fn failed_record_json_uses_null_fitness() {
        let r = EvalRecord::failed(GenomeId(3), 1, "boom".into());
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.contains("\"fitness\":null"), "{line}");
        let back: EvalRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back.fitness, f64::NEG_INFINITY);
        assert_eq!(back, r);
    }

    #[test]
    fn genome_seed_mixes_both_inputs() {
        assert_ne!(genome_seed(1, GenomeId(2)), genome_seed(2, GenomeId(1)));
        assert_eq!(genome_seed(5, GenomeId(9)), genome_seed(5, GenomeId(9)));
    }
}
