//! End-to-end evolution run and model prediction.
//!
//! A run writes into its output directory:
//!
//! | file                | content                                     |
//! |---------------------|---------------------------------------------|
//! | `evolution.jsonl`   | header, one record per evaluation, summary  |
//! | `best.mndl`         | best genome retrained with the final budget |
//! | `best.genome`       | best genome, one-line text form             |
//! | `test.pset`         | the held-out test split                     |
//! | `best_metrics.json` | test metrics of `best.mndl` on `test.pset`  |
//! | `best_metrics.txt`  | the same, human-readable                    |
//! | `config.txt`        | resolved configuration                      |

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::config::RunConfig;
use crate::data::{load_patchset, save_patchset, stratified_split, DataError, PatchSet, Splits, Subset};
use crate::evaluator::{genome_seed, predict_subset, train_short, EvalFailure, Evaluator, TrainingEvaluator};
use crate::evolution::{EvolutionError, MasterState, Member};
use crate::genome::{PriorError, ThroughputPrior};
use crate::metrics::MetricsReport;
use crate::nn::{load_model, save_model, Network, NnError, Precision};
use crate::pool::{run_pool, PoolError, PoolReport};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("missing required key '{0}'")]
    Missing(&'static str),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("prior: {0}")]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error("pool: {0}")]
    Pool(#[from] PoolError),
    #[error("model: {0}")]
    Model(#[from] NnError),
    #[error("final training: {0}")]
    Final(#[from] EvalFailure),
    #[error("no genome was evaluated successfully")]
    NoSuccess,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub best: Member,
    pub evaluations: usize,
    pub log_path: PathBuf,
    pub model_path: PathBuf,
    pub test_path: PathBuf,
    pub test_report: MetricsReport,
    pub pool: PoolReport,
}

/// Loads `data.path` and runs.
pub fn run(config: &RunConfig) -> Result<RunOutcome, RunError> {
    let path = config.data_path.as_ref().ok_or(RunError::Missing("data.path"))?;
    let set = load_patchset(path)?;
    run_with_data(config, Arc::new(set))
}

/// Splits, calibrates, evolves, retrains the best genome and scores it on
/// the test split.
pub fn run_with_data(config: &RunConfig, set: Arc<PatchSet>) -> Result<RunOutcome, RunError> {
    let splits = stratified_split(Arc::clone(&set), config.split, config.split_seed)?;
    if splits.train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
        return Err(RunError::Invalid(
            "data.split must leave train, validation and test splits non-empty".into(),
        ));
    }
    let prior = match &config.prior_path {
        Some(p) => Some(ThroughputPrior::read_csv(
            File::open(p).map_err(io_at(p))?,
            config.prior_beta,
        )?),
        None => None,
    };
    let master = config.master_config(set.shape(), prior);
    let evaluator = Arc::new(TrainingEvaluator {
        splits: splits.clone(),
        settings: config.settings,
        objective: master.objective,
        run_seed: config.seed,
    });
    let mut state = MasterState::new(master)?;
    fs::create_dir_all(&config.out_dir).map_err(io_at(&config.out_dir))?;
    if config.needs_calibration() {
        state.calibrate(evaluator.as_ref(), config.calibration_k)?;
    }
    let config_path = config.out_dir.join("config.txt");
    fs::write(&config_path, config.to_text()).map_err(io_at(&config_path))?;
    let log_path = config.out_dir.join("evolution.jsonl");
    let log = File::create(&log_path).map_err(io_at(&log_path))?;
    state.attach_log(Box::new(BufWriter::new(log)), config.values.clone())?;
    let pool = run_pool(
        &mut state,
        Arc::clone(&evaluator) as Arc<dyn Evaluator>,
        &config.pool_options(),
    )?;
    state.finish_log()?;
    let best = state.best().cloned().ok_or(RunError::NoSuccess)?;

    let model_path = config.out_dir.join("best.mndl");
    let network = retrain(&best, &splits, config)?;
    save_model(&network, &model_path)?;
    let genome_path = config.out_dir.join("best.genome");
    fs::write(&genome_path, format!("{}\n", best.genome)).map_err(io_at(&genome_path))?;
    let test_path = config.out_dir.join("test.pset");
    save_patchset(&splits.test.to_patchset("test"), &test_path)?;

    let test_report = predict_files(&model_path, &test_path, config.settings.predict_batch)?;
    let json_path = config.out_dir.join("best_metrics.json");
    let json = serde_json::to_string_pretty(&test_report).map_err(|e| RunError::Invalid(e.to_string()))?;
    fs::write(&json_path, json).map_err(io_at(&json_path))?;
    let txt_path = config.out_dir.join("best_metrics.txt");
    fs::write(&txt_path, test_report.to_text()).map_err(io_at(&txt_path))?;
    Ok(RunOutcome {
        evaluations: state.completed(),
        best,
        log_path,
        model_path,
        test_path,
        test_report,
        pool,
    })
}

/// Trains the genome from scratch with the longer final budget, in f32 as
/// stored in model files.
pub fn retrain(best: &Member, splits: &Splits, config: &RunConfig) -> Result<Network<f32>, RunError> {
    let mut budget = config.settings.budget;
    budget.epochs = config.final_epochs;
    budget.max_batches_per_epoch = None;
    let seed = genome_seed(config.seed, best.genome.id);
    let net = match config.settings.precision {
        Precision::F32 => train_short::<f32>(&best.genome, &splits.train, &budget, seed)?.network,
        Precision::F64 => train_short::<f64>(&best.genome, &splits.train, &budget, seed)?
            .network
            .cast(),
    };
    Ok(net)
}

/// Scores every patch of `set` with `network` after one untimed warmup
/// batch and reports metrics with the measured prediction rate.
pub fn predict_report(
    network: &Network<f32>,
    set: &PatchSet,
    batch_size: usize,
    model_id: &str,
    dataset_id: &str,
) -> Result<MetricsReport, RunError> {
    if network.input_shape() != set.shape() {
        return Err(RunError::Invalid(format!(
            "model expects {} patches, data has {}",
            network.input_shape(),
            set.shape()
        )));
    }
    if set.is_empty() {
        return Err(RunError::Invalid("cannot predict on an empty patch set".into()));
    }
    let subset = Subset::all(Arc::new(set.clone()));
    let warm: Vec<usize> = (0..batch_size.min(subset.len())).collect();
    let (x, _) = subset.batch::<f32>(&warm);
    network.predict_scores(&x)?;
    let t = Instant::now();
    let scores = predict_subset(network, &subset, batch_size)?;
    let seconds = t.elapsed().as_secs_f64();
    Ok(MetricsReport::new(
        model_id.into(),
        dataset_id.into(),
        &scores,
        &subset.labels(),
        seconds,
    ))
}

pub fn predict_files(model_path: &Path, data_path: &Path, batch_size: usize) -> Result<MetricsReport, RunError> {
    let network = load_model::<f32>(model_path)?;
    let set = load_patchset(data_path)?;
    predict_report(
        &network,
        &set,
        batch_size,
        &model_path.display().to_string(),
        &data_path.display().to_string(),
    )
}
