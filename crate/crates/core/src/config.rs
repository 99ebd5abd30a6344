//! Run configuration: flat `key = value` lines with `#` comments. Every key
//! has a default except `data.path`; unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use crate::evaluator::{EvalSettings, LatencyConfig, TrainBudget};
use crate::evolution::{GaParams, MasterConfig, StopCriteria};
use crate::fitness::{Bounds, ObjectiveConfig, ObjectiveKind};
use crate::genome::{MutationRates, SearchSpace, ThroughputPrior};
use crate::nn::{InputShape, Precision};
use crate::pool::{PoolOptions, Schedule, Transport};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("key '{0}' given twice")]
    Duplicate(String),
    #[error("key '{key}': {message}")]
    Value { key: String, message: String },
    #[error("missing required key '{0}'")]
    Missing(String),
}

/// Every key with its default; `None` marks a required key and `"none"` an
/// unset optional.
pub const KEYS: &[(&str, Option<&str>)] = &[
    ("seed", Some("0")),
    ("data.path", None),
    ("data.split", Some("0.8, 0.1, 0.1")),
    ("data.split_seed", Some("0")),
    ("out.dir", Some("out")),
    ("population.size", Some("50")),
    ("population.elites", Some("2")),
    ("tournament.size", Some("3")),
    ("crossover.probability", Some("0.5")),
    ("mutation.perturb_hparam", Some("0.6")),
    ("mutation.add_layer", Some("0.2")),
    ("mutation.remove_layer", Some("0.2")),
    ("mutation.perturb_lr", Some("0.3")),
    ("budget.epochs", Some("2")),
    ("budget.max_batches_per_epoch", Some("none")),
    ("budget.final_epochs", Some("8")),
    ("stop.max_evaluations", Some("200")),
    ("stop.wall_clock_s", Some("none")),
    ("objective.kind", Some("none")),
    ("objective.alpha", Some("0")),
    ("objective.lo", Some("none")),
    ("objective.hi", Some("none")),
    ("objective.clamp", Some("true")),
    ("calibration.k", Some("10")),
    ("latency.batch_size", Some("32")),
    ("latency.reps", Some("5")),
    ("latency.warmup", Some("1")),
    ("precision", Some("f32")),
    ("predict.batch_size", Some("128")),
    ("workers", Some("1")),
    ("transport", Some("in_process")),
    ("port", Some("0")),
    ("spawn_workers", Some("true")),
    ("schedule", Some("free")),
    ("eval_timeout_s", Some("none")),
    ("search.out_channels", Some("8, 16, 32, 64, 128, 256")),
    ("search.kernels", Some("1, 2, 3, 4, 5, 6, 7")),
    ("search.strides", Some("1, 2, 3")),
    ("search.pool_sizes", Some("2, 3")),
    ("search.pool_strides", Some("1, 2, 3")),
    ("search.dense_units", Some("16, 1024")),
    ("search.batch_sizes", Some("16, 32, 64, 128, 256")),
    ("search.lr_range", Some("0.001, 0.1")),
    ("search.momentum_range", Some("0, 0.95")),
    ("search.max_initial_features", Some("6")),
    ("search.max_features", Some("12")),
    ("search.max_head", Some("3")),
    ("search.pool_probability", Some("0.25")),
    ("prior.path", Some("none")),
    ("prior.beta", Some("0.5")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    Socket,
}

/// Fully validated run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Resolved `key → value` for every key, as written to the log header.
    pub values: BTreeMap<String, String>,
    pub seed: u64,
    pub data_path: Option<PathBuf>,
    pub split: [f64; 3],
    pub split_seed: u64,
    pub out_dir: PathBuf,
    pub ga: GaParams,
    pub settings: EvalSettings,
    pub final_epochs: usize,
    pub stop: StopCriteria,
    pub objective_kind: ObjectiveKind,
    pub alpha: f64,
    pub bounds: Option<Bounds>,
    pub clamp: bool,
    pub calibration_k: usize,
    pub workers: usize,
    pub transport: TransportKind,
    pub port: u16,
    /// With the socket transport, start the workers as local threads;
    /// otherwise wait for `worker` processes to connect.
    pub spawn_workers: bool,
    pub schedule: Schedule,
    pub eval_timeout: Option<Duration>,
    /// Input shape is taken from the dataset at run time.
    pub space: SearchSpace,
    pub prior_path: Option<PathBuf>,
    pub prior_beta: f64,
}

fn value_err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        message: message.into(),
    }
}

struct Reader<'a> {
    values: &'a BTreeMap<String, String>,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("every key resolved")
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key).parse().map_err(|e| value_err(key, format!("{e}")))
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            "none" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|e| value_err(key, format!("'{}': {e}", v.trim())))
            })
            .collect()
    }

    fn pair<T: FromStr + Copy>(&self, key: &str) -> Result<(T, T), ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.list(key)?.as_slice() {
            [a, b] => Ok((*a, *b)),
            other => Err(value_err(key, format!("expected two values, got {}", other.len()))),
        }
    }
}

impl RunConfig {
    /// Parses a configuration file; keys not mentioned take their defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut given = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected key = value, got '{line}'"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(name, _)| *name == k) {
                return Err(ConfigError::UnknownKey(k.into()));
            }
            if given.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::Duplicate(k.into()));
            }
        }
        Self::from_pairs(given)
    }

    /// Defaults overridden by `pairs`.
    pub fn from_pairs(pairs: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (k, default) in KEYS {
            if let Some(d) = default {
                values.insert(k.to_string(), d.to_string());
            }
        }
        for (k, v) in pairs {
            if !KEYS.iter().any(|(name, _)| *name == k) {
                return Err(ConfigError::UnknownKey(k));
            }
            values.insert(k, v);
        }
        values.entry("data.path".into()).or_insert_with(|| "none".into());
        Self::build(values)
    }

    /// Same configuration with one key replaced.
    pub fn with(&self, key: &str, value: &str) -> Result<Self, ConfigError> {
        if !KEYS.iter().any(|(name, _)| *name == key) {
            return Err(ConfigError::UnknownKey(key.into()));
        }
        let mut values = self.values.clone();
        values.insert(key.into(), value.into());
        Self::build(values)
    }

    fn build(values: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let r = Reader { values: &values };
        let split: Vec<f64> = r.list("data.split")?;
        let split: [f64; 3] = split
            .try_into()
            .map_err(|_| value_err("data.split", "expected three fractions (train, val, test)"))?;
        if split.iter().any(|f| !(0.0..=1.0).contains(f)) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(value_err("data.split", "fractions must lie in [0, 1] and sum to 1"));
        }
        let ga = GaParams {
            population: r.get("population.size")?,
            elites: r.get("population.elites")?,
            tournament: r.get("tournament.size")?,
            crossover_probability: r.get("crossover.probability")?,
            mutation: MutationRates {
                perturb_hparam: r.get("mutation.perturb_hparam")?,
                add_layer: r.get("mutation.add_layer")?,
                remove_layer: r.get("mutation.remove_layer")?,
                perturb_lr: r.get("mutation.perturb_lr")?,
            },
        };
        ga.validate().map_err(|m| value_err("population", m))?;
        let settings = EvalSettings {
            budget: TrainBudget {
                epochs: r.get("budget.epochs")?,
                max_batches_per_epoch: r.opt("budget.max_batches_per_epoch")?,
            },
            latency: LatencyConfig {
                batch_size: r.get("latency.batch_size")?,
                reps: r.get("latency.reps")?,
                warmup: r.get("latency.warmup")?,
            },
            precision: r.get::<Precision>("precision")?,
            predict_batch: r.get("predict.batch_size")?,
        };
        if settings.budget.epochs == 0 {
            return Err(value_err("budget.epochs", "must be at least 1"));
        }
        settings.latency.validate().map_err(|m| value_err("latency", m))?;
        if settings.predict_batch == 0 {
            return Err(value_err("predict.batch_size", "must be at least 1"));
        }
        let final_epochs: usize = r.get("budget.final_epochs")?;
        if final_epochs == 0 {
            return Err(value_err("budget.final_epochs", "must be at least 1"));
        }
        let wall: Option<f64> = r.opt("stop.wall_clock_s")?;
        if wall.is_some_and(|w| !(w.is_finite() && w > 0.0)) {
            return Err(value_err("stop.wall_clock_s", "must be a positive number of seconds"));
        }
        let stop = StopCriteria {
            max_evaluations: r.opt("stop.max_evaluations")?,
            wall_clock: wall.map(Duration::from_secs_f64),
        };
        if stop.max_evaluations.is_none() && stop.wall_clock.is_none() {
            return Err(value_err("stop.max_evaluations", "set it or stop.wall_clock_s"));
        }
        let objective_kind: ObjectiveKind = r.get("objective.kind")?;
        let alpha: f64 = r.get("objective.alpha")?;
        if !alpha.is_finite() {
            return Err(value_err("objective.alpha", "must be finite"));
        }
        let bounds = match (r.opt::<f64>("objective.lo")?, r.opt::<f64>("objective.hi")?) {
            (Some(lo), Some(hi)) => Some(Bounds::new(lo, hi).map_err(|e| value_err("objective.lo", e.to_string()))?),
            (None, None) => None,
            _ => {
                return Err(value_err(
                    "objective.lo",
                    "objective.lo and objective.hi must be set together",
                ))
            }
        };
        let calibration_k: usize = r.get("calibration.k")?;
        if calibration_k < 2 {
            return Err(value_err("calibration.k", "must be at least 2"));
        }
        let workers: usize = r.get("workers")?;
        if workers == 0 {
            return Err(value_err("workers", "must be at least 1"));
        }
        let transport = match r.raw("transport") {
            "in_process" => TransportKind::InProcess,
            "socket" => TransportKind::Socket,
            other => return Err(value_err("transport", format!("'{other}' is not in_process or socket"))),
        };
        let schedule = match r.raw("schedule") {
            "free" => Schedule::Free,
            "ordered" => Schedule::Ordered,
            "sync" => Schedule::Sync,
            other => return Err(value_err("schedule", format!("'{other}' is not free, ordered or sync"))),
        };
        let timeout: Option<f64> = r.opt("eval_timeout_s")?;
        if timeout.is_some_and(|t| !(t.is_finite() && t > 0.0)) {
            return Err(value_err("eval_timeout_s", "must be a positive number of seconds"));
        }
        if timeout.is_some() && schedule != Schedule::Free {
            return Err(value_err("eval_timeout_s", "timeouts need schedule = free"));
        }
        if schedule == Schedule::Sync && transport != TransportKind::InProcess {
            return Err(value_err("schedule", "sync runs in process only"));
        }
        let space = SearchSpace {
            input_shape: InputShape::default(),
            out_channels: r.list("search.out_channels")?,
            kernels: r.list("search.kernels")?,
            strides: r.list("search.strides")?,
            pool_sizes: r.list("search.pool_sizes")?,
            pool_strides: r.list("search.pool_strides")?,
            dense_units: r.pair("search.dense_units")?,
            batch_sizes: r.list("search.batch_sizes")?,
            lr_range: r.pair("search.lr_range")?,
            momentum_range: r.pair("search.momentum_range")?,
            max_initial_features: r.get("search.max_initial_features")?,
            max_features: r.get("search.max_features")?,
            max_head: r.get("search.max_head")?,
            pool_probability: r.get("search.pool_probability")?,
        };
        space.validate().map_err(|m| value_err("search", m))?;
        let prior_beta: f64 = r.get("prior.beta")?;
        if !(0.0..=1.0).contains(&prior_beta) {
            return Err(value_err("prior.beta", "must lie in [0, 1]"));
        }
        Ok(Self {
            seed: r.get("seed")?,
            data_path: r.opt("data.path")?,
            split,
            split_seed: r.get("data.split_seed")?,
            out_dir: r.get("out.dir")?,
            ga,
            settings,
            final_epochs,
            stop,
            objective_kind,
            alpha,
            bounds,
            clamp: r.get("objective.clamp")?,
            calibration_k,
            workers,
            transport,
            port: r.get("port")?,
            spawn_workers: r.get("spawn_workers")?,
            schedule,
            eval_timeout: timeout.map(Duration::from_secs_f64),
            space,
            prior_path: r.opt("prior.path")?,
            prior_beta,
            values,
        })
    }

    /// Objective as configured; bounds are provisional until calibration
    /// when none were given.
    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            kind: self.objective_kind,
            alpha: self.alpha,
            bounds: self.bounds.unwrap_or(Bounds { lo: 0.0, hi: 1.0 }),
            clamp: self.clamp,
        }
    }

    /// Whether the run has to calibrate objective bounds first.
    pub fn needs_calibration(&self) -> bool {
        self.objective_kind != ObjectiveKind::None && self.bounds.is_none()
    }

    pub fn master_config(&self, input: InputShape, prior: Option<ThroughputPrior>) -> MasterConfig {
        let mut space = self.space.clone();
        space.input_shape = input;
        MasterConfig {
            ga: self.ga,
            space,
            prior,
            objective: self.objective(),
            stop: self.stop,
            seed: self.seed,
        }
    }

    pub fn pool_options(&self) -> PoolOptions {
        PoolOptions {
            workers: self.workers,
            transport: match self.transport {
                TransportKind::InProcess => Transport::InProcess,
                TransportKind::Socket => Transport::Socket {
                    port: self.port,
                    spawn_local: self.spawn_workers,
                },
            },
            schedule: self.schedule,
            eval_timeout: self.eval_timeout,
            connect_timeout: Duration::from_secs(30),
        }
    }

    /// The resolved configuration as a file `parse` accepts.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.values[*k]);
        }
        out
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_pairs(BTreeMap::new()).expect("defaults are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = RunConfig::default();
        assert_eq!(c.ga, GaParams::default());
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert_eq!(
            RunConfig::parse("populaton.size = 4"),
            Err(ConfigError::UnknownKey("populaton.size".into()))
        );
        assert_eq!(
            RunConfig::parse("seed = 1\nseed = 2"),
            Err(ConfigError::Duplicate("seed".into()))
        );
        assert!(matches!(
            RunConfig::parse("objective.lo = 1"),
            Err(ConfigError::Value { key, .. }) if key == "objective.lo"
        ));
    }

    #[test]
    fn comments_and_overrides() {
        let c = RunConfig::parse("# run\nworkers = 4  # four\nobjective.kind = flop_proxy\nobjective.alpha = -0.3\n")
            .unwrap();
        assert_eq!(c.workers, 4);
        assert!(c.needs_calibration());
        assert_eq!(c.with("objective.lo", "1").err().map(|e| e.to_string()).is_some(), true);
        let c = c.with("data.path", "x.pset").unwrap();
        assert_eq!(c.data_path, Some(PathBuf::from("x.pset")));
    }
}
