//! Steady-state genetic-algorithm master. Candidates are generated one at a
//! time on request and results are folded in as they arrive, so no worker
//! ever waits for a generation to finish.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, BufRead, Write};
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evaluator::{EvalRecord, Evaluator};
use crate::fitness::{compare, raw_objective, rescore, score, Bounds, ObjectiveConfig, ObjectiveKind};
use crate::genome::{crossover, mutate, random_genome, Genome, GenomeId, MutationRates, SearchSpace, ThroughputPrior};

pub const LOG_FORMAT: &str = "evonas-log";
pub const LOG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EvolutionError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("log i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaParams {
    pub population: usize,
    pub elites: usize,
    pub tournament: usize,
    pub crossover_probability: f64,
    pub mutation: MutationRates,
}

impl Default for GaParams {
    fn default() -> Self {
        Self {
            population: 50,
            elites: 2,
            tournament: 3,
            crossover_probability: 0.5,
            mutation: MutationRates::default(),
        }
    }
}

impl GaParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.population < 2 {
            return Err(format!("population.size must be at least 2, got {}", self.population));
        }
        if self.elites >= self.population {
            return Err(format!(
                "population.elites ({}) must be below population.size ({})",
                self.elites, self.population
            ));
        }
        if self.tournament == 0 {
            return Err("tournament.size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.crossover_probability) {
            return Err(format!(
                "crossover.probability = {} is not a probability",
                self.crossover_probability
            ));
        }
        self.mutation.validate()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StopCriteria {
    pub max_evaluations: Option<usize>,
    pub wall_clock: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MasterConfig {
    pub ga: GaParams,
    pub space: SearchSpace,
    pub prior: Option<ThroughputPrior>,
    pub objective: ObjectiveConfig,
    pub stop: StopCriteria,
    pub seed: u64,
}

impl MasterConfig {
    pub fn new(space: SearchSpace, objective: ObjectiveConfig, seed: u64) -> Self {
        Self {
            ga: GaParams::default(),
            space,
            prior: None,
            objective,
            stop: StopCriteria::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.ga.validate()?;
        self.space.validate()?;
        if self.stop.max_evaluations.is_none() && self.stop.wall_clock.is_none() {
            return Err("no stop criterion: set stop.max_evaluations or stop.wall_clock_s".into());
        }
        Ok(())
    }
}

/// An evaluated genome.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub genome: Genome,
    pub record: EvalRecord,
}

/// Members kept sorted best-first by `compare`.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    capacity: usize,
    elite_count: usize,
    members: Vec<Member>,
}

impl Population {
    pub fn new(capacity: usize, elite_count: usize) -> Self {
        assert!(elite_count < capacity, "elites must leave room for newcomers");
        Self {
            capacity,
            elite_count,
            members: Vec::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.members.len() >= self.capacity
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn best(&self) -> Option<&Member> {
        self.members.first()
    }

    pub fn elites(&self) -> &[Member] {
        &self.members[..self.elite_count.min(self.members.len())]
    }

    /// Inserts `member` and, when over capacity, evicts and returns the worst
    /// non-elite (possibly `member` itself).
    pub fn insert(&mut self, member: Member) -> Option<Member> {
        let at = self
            .members
            .partition_point(|m| compare(&m.record, &member.record).is_lt());
        self.members.insert(at, member);
        if self.members.len() > self.capacity {
            // sorted best-first, so the last member is the worst non-elite
            self.members.pop()
        } else {
            None
        }
    }

    /// Best of `size` distinct members drawn uniformly (all members when the
    /// population is smaller).
    pub fn tournament<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> &Member {
        assert!(!self.members.is_empty(), "tournament on an empty population");
        let n = self.members.len();
        let best = sample(rng, n, size.min(n)).into_iter().min().expect("nonempty draw");
        &self.members[best]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub k: usize,
    pub successes: usize,
    pub raw: Vec<f64>,
    pub bounds: Bounds,
}

/// `(min − 10%·|min|, max + 10%·|max|)` of the raw objective values.
pub fn widened_bounds(raw: &[f64]) -> Result<Bounds, EvolutionError> {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raw.is_empty() {
        return Err(EvolutionError::Calibration(
            "every calibration genome failed; no objective values to calibrate from".into(),
        ));
    }
    if min == max {
        return Err(EvolutionError::Calibration(format!(
            "all {} successful calibration genomes have objective value {min}; lo == hi, set objective.lo/objective.hi explicitly or raise calibration.k",
            raw.len()
        )));
    }
    Bounds::new(min - 0.1 * min.abs(), max + 0.1 * max.abs()).map_err(|e| EvolutionError::Calibration(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    /// Run configuration as given, key by key.
    pub config: BTreeMap<String, String>,
    pub objective: ObjectiveConfig,
    pub calibration: Option<Calibration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEval {
    /// 1-based position in the log.
    pub seq: usize,
    /// Genome in its one-line text form.
    pub genome: String,
    pub record: EvalRecord,
    #[serde(with = "crate::evaluator::finite_or_null")]
    pub best_fitness: f64,
    pub best_genome_id: Option<GenomeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub evaluations: usize,
    pub failures: usize,
    pub best_genome_id: Option<GenomeId>,
    #[serde(with = "crate::evaluator::finite_or_null")]
    pub best_fitness: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogLine {
    Header(LogHeader),
    Eval(LogEval),
    Summary(LogSummary),
}

/// What `receive_result` did with a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Received {
    pub inserted: bool,
    pub evicted: Option<GenomeId>,
    pub new_best: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct Pending {
    genome: Genome,
    worker_id: usize,
}

pub struct MasterState {
    config: MasterConfig,
    population: Population,
    pending: BTreeMap<GenomeId, Pending>,
    rng: ChaCha8Rng,
    issued: usize,
    completed: usize,
    failures: usize,
    best: Option<Member>,
    calibration: Option<Calibration>,
    log: Option<Box<dyn Write + Send>>,
    protocol_errors: Vec<String>,
    started: Instant,
}

impl MasterState {
    pub fn new(config: MasterConfig) -> Result<Self, EvolutionError> {
        config.validate().map_err(EvolutionError::Config)?;
        Ok(Self {
            population: Population::new(config.ga.population, config.ga.elites),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            pending: BTreeMap::new(),
            issued: 0,
            completed: 0,
            failures: 0,
            best: None,
            calibration: None,
            log: None,
            protocol_errors: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &MasterConfig {
        &self.config
    }

    pub fn population(&self) -> &Population {
        &self.population
    }

    pub fn best(&self) -> Option<&Member> {
        self.best.as_ref()
    }

    pub fn issued(&self) -> usize {
        self.issued
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn failures(&self) -> usize {
        self.failures
    }

    pub fn calibration(&self) -> Option<&Calibration> {
        self.calibration.as_ref()
    }

    pub fn protocol_errors(&self) -> &[String] {
        &self.protocol_errors
    }

    pub fn pending_worker(&self, id: GenomeId) -> Option<usize> {
        self.pending.get(&id).map(|p| p.worker_id)
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    /// Whether the stop criteria still allow issuing another candidate.
    pub fn can_issue(&self) -> bool {
        let under_count = self.config.stop.max_evaluations.is_none_or(|m| self.issued < m);
        let under_time = self.config.stop.wall_clock.is_none_or(|t| self.started.elapsed() < t);
        under_count && under_time
    }

    /// No more candidates will be issued and nothing is outstanding.
    pub fn is_done(&self) -> bool {
        !self.can_issue() && self.pending.is_empty()
    }

    /// Evaluates `k` random genomes in turn and fixes the objective bounds
    /// from their raw costs. Skipped (returns the configured bounds) when the
    /// objective is `none`.
    pub fn calibrate(&mut self, evaluator: &dyn Evaluator, k: usize) -> Result<Bounds, EvolutionError> {
        if k < 2 {
            return Err(EvolutionError::Calibration(format!(
                "calibration.k must be at least 2, got {k}"
            )));
        }
        let kind = self.config.objective.kind;
        if kind == ObjectiveKind::None {
            return Ok(self.config.objective.bounds);
        }
        let mut raw = Vec::new();
        for _ in 0..k {
            let g = random_genome(&mut self.rng, &self.config.space, self.config.prior.as_ref());
            let r = evaluator.evaluate(&g, 0);
            if r.is_ok() {
                raw.extend(raw_objective(&r, kind));
            }
        }
        let bounds = widened_bounds(&raw)?;
        self.config.objective.bounds = bounds;
        self.calibration = Some(Calibration {
            k,
            successes: raw.len(),
            raw,
            bounds,
        });
        Ok(bounds)
    }

    /// Starts the JSON-lines log with its header record. Call after
    /// calibration so the header carries the bounds.
    pub fn attach_log(
        &mut self,
        mut sink: Box<dyn Write + Send>,
        config_pairs: BTreeMap<String, String>,
    ) -> Result<(), EvolutionError> {
        let header = LogLine::Header(LogHeader {
            format: LOG_FORMAT.into(),
            version: LOG_VERSION,
            seed: self.config.seed,
            config: config_pairs,
            objective: self.config.objective,
            calibration: self.calibration.clone(),
        });
        write_line(&mut sink, &header)?;
        self.log = Some(sink);
        Ok(())
    }

    /// Writes the summary record and flushes the log.
    pub fn finish_log(&mut self) -> Result<(), EvolutionError> {
        let summary = LogLine::Summary(LogSummary {
            evaluations: self.completed,
            failures: self.failures,
            best_genome_id: self.best.as_ref().map(|m| m.genome.id),
            best_fitness: self.best.as_ref().map_or(f64::NEG_INFINITY, |m| m.record.fitness),
            wall_time_s: self.started.elapsed().as_secs_f64(),
        });
        if let Some(mut sink) = self.log.take() {
            write_line(&mut sink, &summary)?;
            sink.flush()?;
        }
        Ok(())
    }

    /// The next genome for `worker_id`: random while the population is
    /// filling, afterwards a tournament-selected crossover or clone, mutated.
    pub fn next_candidate(&mut self, worker_id: usize) -> Result<Genome, EvolutionError> {
        if self.pending.values().any(|p| p.worker_id == worker_id) {
            return Err(EvolutionError::Protocol(format!(
                "worker {worker_id} requested work while still holding a genome"
            )));
        }
        let ga = self.config.ga;
        let space = &self.config.space;
        let prior = self.config.prior.as_ref();
        let genome = if !self.population.is_full() {
            random_genome(&mut self.rng, space, prior)
        } else {
            let a = self.population.tournament(ga.tournament, &mut self.rng).clone();
            let b = self.population.tournament(ga.tournament, &mut self.rng).clone();
            let (base, parents) = if self.rng.gen_bool(ga.crossover_probability) {
                let child = crossover(&a.genome, &b.genome, &mut self.rng, space);
                let parents = child.parent_ids.clone();
                (child, Some(parents))
            } else if compare(&a.record, &b.record).is_le() {
                (a.genome, None)
            } else {
                (b.genome, None)
            };
            let mut child = mutate(&base, &mut self.rng, &ga.mutation, space, prior);
            if let Some(parents) = parents {
                child.parent_ids = parents;
            }
            child
        };
        self.pending.insert(
            genome.id,
            Pending {
                genome: genome.clone(),
                worker_id,
            },
        );
        self.issued += 1;
        Ok(genome)
    }

    /// Moves a pending genome to another worker (reissue after a timeout).
    pub fn reassign(&mut self, id: GenomeId, worker_id: usize) -> Result<(), EvolutionError> {
        match self.pending.get_mut(&id) {
            Some(p) => {
                p.worker_id = worker_id;
                Ok(())
            }
            None => Err(EvolutionError::Protocol(format!(
                "reassign of genome {id} which is not pending"
            ))),
        }
    }

    /// Folds a finished evaluation into the population. The record is
    /// rescored with the master's objective so every logged fitness uses the
    /// same bounds. Unknown genome ids are recorded as protocol errors and
    /// dropped.
    pub fn receive_result(&mut self, mut record: EvalRecord) -> Result<Received, EvolutionError> {
        let Some(pending) = self.pending.remove(&record.genome_id) else {
            let msg = format!("result for genome {} which is not pending", record.genome_id);
            self.protocol_errors.push(msg.clone());
            return Err(EvolutionError::Protocol(msg));
        };
        rescore(&mut record, &self.config.objective);
        self.completed += 1;
        let member = Member {
            genome: pending.genome,
            record,
        };
        let mut received = Received {
            inserted: false,
            evicted: None,
            new_best: false,
        };
        if member.record.is_ok() {
            if self
                .best
                .as_ref()
                .is_none_or(|b| compare(&member.record, &b.record).is_lt())
            {
                self.best = Some(member.clone());
                received.new_best = true;
            }
            let evicted = self.population.insert(member.clone());
            received.inserted = evicted.as_ref().is_none_or(|e| e.genome.id != member.genome.id);
            received.evicted = evicted.map(|e| e.genome.id);
        } else {
            self.failures += 1;
        }
        if let Some(sink) = self.log.as_mut() {
            let line = LogLine::Eval(LogEval {
                seq: self.completed,
                genome: member.genome.to_string(),
                record: member.record,
                best_fitness: self.best.as_ref().map_or(f64::NEG_INFINITY, |b| b.record.fitness),
                best_genome_id: self.best.as_ref().map(|b| b.genome.id),
            });
            write_line(sink, &line)?;
        }
        Ok(received)
    }
}

fn write_line(sink: &mut Box<dyn Write + Send>, line: &LogLine) -> Result<(), EvolutionError> {
    let text = serde_json::to_string(line).map_err(io::Error::other)?;
    writeln!(sink, "{text}")?;
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("read: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub header: LogHeader,
    pub evaluations: usize,
    pub failures: usize,
    pub best_fitness: f64,
    pub best_genome_id: Option<GenomeId>,
    pub has_summary: bool,
}

/// Checks an evolution log: header first, consecutive sequence numbers,
/// one record per genome, fitness consistent with the header's objective,
/// and a best-so-far that equals the running maximum and never decreases.
pub fn audit_log<R: BufRead>(reader: R) -> Result<AuditReport, AuditError> {
    let mut header: Option<LogHeader> = None;
    let mut seen = HashSet::new();
    let mut evaluations = 0;
    let mut failures = 0;
    let mut best: Option<EvalRecord> = None;
    let mut last_best = f64::NEG_INFINITY;
    let mut has_summary = false;
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let bad = |message: String| AuditError::Invalid { line: n, message };
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if has_summary {
            return Err(bad("record after the summary".into()));
        }
        let parsed: LogLine = serde_json::from_str(&line).map_err(|e| bad(format!("not a log record: {e}")))?;
        match parsed {
            LogLine::Header(h) => {
                if header.is_some() || n != 1 {
                    return Err(bad("header must be the first and only header line".into()));
                }
                if h.format != LOG_FORMAT || h.version != LOG_VERSION {
                    return Err(bad(format!("unsupported log format {} v{}", h.format, h.version)));
                }
                header = Some(h);
            }
            LogLine::Eval(e) => {
                let h = header.as_ref().ok_or_else(|| bad("evaluation before header".into()))?;
                evaluations += 1;
                if e.seq != evaluations {
                    return Err(bad(format!("sequence {} where {evaluations} expected", e.seq)));
                }
                if !seen.insert(e.record.genome_id) {
                    return Err(bad(format!("second record for genome {}", e.record.genome_id)));
                }
                let genome: Genome = e.genome.parse().map_err(|err| bad(format!("{err}")))?;
                if genome.id != e.record.genome_id {
                    return Err(bad("genome text and record disagree on the id".into()));
                }
                let expect = score(&e.record, &h.objective).f;
                let same = expect == e.record.fitness || (expect.is_nan() && e.record.fitness.is_nan());
                if !same {
                    return Err(bad(format!(
                        "fitness {} does not match objective ({expect})",
                        e.record.fitness
                    )));
                }
                if e.record.is_ok() {
                    if best.as_ref().is_none_or(|b| compare(&e.record, b).is_lt()) {
                        best = Some(e.record.clone());
                    }
                } else {
                    failures += 1;
                }
                let running = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.fitness);
                if e.best_fitness < last_best {
                    return Err(bad(format!("best fitness fell from {last_best} to {}", e.best_fitness)));
                }
                if e.best_fitness != running || e.best_genome_id != best.as_ref().map(|b| b.genome_id) {
                    return Err(bad(format!(
                        "best-so-far {} disagrees with the running best {running}",
                        e.best_fitness
                    )));
                }
                last_best = e.best_fitness;
            }
            LogLine::Summary(s) => {
                if s.evaluations != evaluations || s.failures != failures {
                    return Err(bad("summary counts disagree with the records".into()));
                }
                has_summary = true;
            }
        }
    }
    let header = header.ok_or(AuditError::Invalid {
        line: 0,
        message: "empty log".into(),
    })?;
    Ok(AuditReport {
        header,
        evaluations,
        failures,
        best_fitness: best.as_ref().map_or(f64::NEG_INFINITY, |b| b.fitness),
        best_genome_id: best.map(|b| b.genome_id),
        has_summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::EvalStatus;

    fn member(id: u64, f: f64) -> Member {
        let mut rng = ChaCha8Rng::seed_from_u64(id);
        let mut genome = random_genome(&mut rng, &SearchSpace::default(), None);
        genome.id = GenomeId(id);
        let mut record = EvalRecord::failed(GenomeId(id), 0, String::new());
        record.status = EvalStatus::Ok;
        record.fitness = f;
        Member { genome, record }
    }

    #[test]
    fn eviction_removes_worst() {
        let mut p = Population::new(3, 1);
        for (id, f) in [(1, 0.5), (2, 0.9), (3, 0.1)] {
            assert!(p.insert(member(id, f)).is_none());
        }
        let evicted = p.insert(member(4, 0.3)).unwrap();
        assert_eq!(evicted.genome.id, GenomeId(3));
        assert_eq!(p.best().unwrap().genome.id, GenomeId(2));
        let evicted = p.insert(member(5, 0.0)).unwrap();
        assert_eq!(evicted.genome.id, GenomeId(5));
    }

    #[test]
    fn bounds_widen_by_ten_percent() {
        let b = widened_bounds(&[20.0, 10.0]).unwrap();
        assert!((b.lo - 9.0).abs() < 1e-12 && (b.hi - 22.0).abs() < 1e-12);
        assert!(widened_bounds(&[5.0, 5.0]).is_err());
        assert!(widened_bounds(&[]).is_err());
    }
}
