//! Scalarized fitness `f = v + alpha·m`: `v` is validation F1 and `m` a cost
//! objective normalized to [0, 1] by fixed bounds. Minimized costs use
//! `alpha < 0`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::evaluator::{EvalRecord, EvalStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Median seconds per inference batch.
    MeasuredLatency,
    /// Inference FLOPs per patch.
    FlopProxy,
    ParamCount,
    None,
}

impl ObjectiveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveKind::MeasuredLatency => "measured_latency",
            ObjectiveKind::FlopProxy => "flop_proxy",
            ObjectiveKind::ParamCount => "param_count",
            ObjectiveKind::None => "none",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "measured_latency" => ObjectiveKind::MeasuredLatency,
            "flop_proxy" => ObjectiveKind::FlopProxy,
            "param_count" => ObjectiveKind::ParamCount,
            "none" => ObjectiveKind::None,
            other => {
                return Err(format!(
                    "unknown objective '{other}' (expected measured_latency, flop_proxy, param_count or none)"
                ))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self, FitnessError> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(FitnessError::BadBounds { lo, hi });
        }
        Ok(Self { lo, hi })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitnessError {
    #[error("objective bounds need finite lo < hi, got lo={lo} hi={hi}")]
    BadBounds { lo: f64, hi: f64 },
    #[error("objective {0} needs bounds (set objective.lo/objective.hi or calibrate)")]
    MissingBounds(ObjectiveKind),
    #[error("alpha must be finite, got {0}")]
    BadAlpha(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub alpha: f64,
    /// Unused when `kind` is `None`.
    pub bounds: Bounds,
    pub clamp: bool,
}

impl ObjectiveConfig {
    /// Fitness equals validation F1.
    pub fn none() -> Self {
        Self {
            kind: ObjectiveKind::None,
            alpha: 0.0,
            bounds: Bounds { lo: 0.0, hi: 1.0 },
            clamp: true,
        }
    }

    pub fn new(kind: ObjectiveKind, alpha: f64, bounds: Option<Bounds>, clamp: bool) -> Result<Self, FitnessError> {
        if !alpha.is_finite() {
            return Err(FitnessError::BadAlpha(alpha));
        }
        let bounds = match (kind, bounds) {
            (ObjectiveKind::None, b) => b.unwrap_or(Bounds { lo: 0.0, hi: 1.0 }),
            (_, Some(b)) => Bounds::new(b.lo, b.hi)?,
            (k, None) => return Err(FitnessError::MissingBounds(k)),
        };
        Ok(Self {
            kind,
            alpha,
            bounds,
            clamp,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessValue {
    pub v: f64,
    pub m: f64,
    pub f: f64,
}

/// `(raw − lo) / (hi − lo)`, clamped to [0, 1] when `clamp`.
pub fn normalize_objective(raw: f64, bounds: Bounds, clamp: bool) -> f64 {
    let m = (raw - bounds.lo) / (bounds.hi - bounds.lo);
    if clamp {
        m.clamp(0.0, 1.0)
    } else {
        m
    }
}

pub fn fitness(v: f64, m: f64, alpha: f64) -> f64 {
    v + alpha * m
}

/// The record's raw cost for `kind`, or `None` when it was not measured.
pub fn raw_objective(record: &EvalRecord, kind: ObjectiveKind) -> Option<f64> {
    match kind {
        ObjectiveKind::MeasuredLatency => record.latency.as_ref().map(|l| l.median_s_per_batch),
        ObjectiveKind::FlopProxy => Some(record.flops_inference as f64),
        ObjectiveKind::ParamCount => Some(record.params as f64),
        ObjectiveKind::None => None,
    }
}

/// Fitness of a record under `config`. Failed records, and records missing
/// the measurement the objective needs, score `−∞`.
pub fn score(record: &EvalRecord, config: &ObjectiveConfig) -> FitnessValue {
    let v = record.val_f1;
    if record.status != EvalStatus::Ok {
        return FitnessValue {
            v,
            m: 0.0,
            f: f64::NEG_INFINITY,
        };
    }
    if config.kind == ObjectiveKind::None {
        return FitnessValue { v, m: 0.0, f: v };
    }
    match raw_objective(record, config.kind) {
        Some(raw) => {
            let m = normalize_objective(raw, config.bounds, config.clamp);
            FitnessValue {
                v,
                m,
                f: fitness(v, m, config.alpha),
            }
        }
        None => FitnessValue {
            v,
            m: 0.0,
            f: f64::NEG_INFINITY,
        },
    }
}

/// Writes `score` into the record.
pub fn rescore(record: &mut EvalRecord, config: &ObjectiveConfig) {
    let s = score(record, config);
    record.objective_m = s.m;
    record.fitness = s.f;
}

/// Total order with the best record first: higher fitness, then fewer
/// inference FLOPs, then smaller genome id. NaN fitness ranks with `−∞`.
pub fn compare(a: &EvalRecord, b: &EvalRecord) -> Ordering {
    let key = |r: &EvalRecord| {
        if r.fitness.is_nan() {
            f64::NEG_INFINITY
        } else {
            r.fitness
        }
    };
    key(b)
        .total_cmp(&key(a))
        .then(a.flops_inference.cmp(&b.flops_inference))
        .then(a.genome_id.cmp(&b.genome_id))
}
