use std::fs::{self, File};
use std::io::BufWriter;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use evonas_core::bench::{
    build_prior, epoch_times, sleep_stub, sweep_conv, timing_distribution, weak_scaling, write_histogram_csv,
    write_scaling_csv, write_sweep_csv, SweepGrid,
};
use evonas_core::config::RunConfig;
use evonas_core::data::{generate_synthetic, load_patchset, reference_counts, save_patchset, stratified_split};
use evonas_core::evaluator::{grad_check_genomes, Evaluator, TrainingEvaluator};
use evonas_core::genome::{Genome, SearchSpace};
use evonas_core::pool::run_socket_worker;
use evonas_core::run::{predict_files, run};

/// Evolutionary architecture search for small convolutional patch classifiers.
#[derive(Parser)]
#[command(name = "evonas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a network, retrain the best one and score it on the test split.
    Evolve(EvolveArgs),
    /// Time single conv layers over a hyperparameter grid.
    Sweep(SweepArgs),
    /// Measure pool throughput for increasing worker counts.
    BenchScaling(ScalingArgs),
    /// Collect per-epoch training times of one topology and look for modes.
    BenchTiming(TimingArgs),
    /// Write a synthetic patch set.
    GenData(GenDataArgs),
    /// Score a saved model on a patch set.
    Predict(PredictArgs),
    /// Compare backpropagation with finite differences on random networks.
    Gradcheck(GradcheckArgs),
    /// Serve evaluations to an `evolve` run over the socket transport.
    Worker(WorkerArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    InProcess,
    Socket,
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Patch set; overrides `data.path`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvolveArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output directory; overrides `out.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    #[arg(long)]
    port: Option<u16>,
    /// Seconds before an unanswered evaluation is reissued.
    #[arg(long, value_name = "SECONDS")]
    eval_timeout: Option<f64>,
    /// Wait for `evonas worker` processes instead of starting socket workers.
    #[arg(long)]
    external_workers: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Grid of `key = v1, v2, ...` lines; the built-in grid when omitted.
    #[arg(long)]
    grid_file: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rows used for the throughput prior.
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Weight of the prior against a uniform choice.
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScalingArgs {
    /// Ascending worker counts.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    workers: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    per_worker: usize,
    /// Stub evaluation time range in milliseconds.
    #[arg(long, default_value_t = 50)]
    min_ms: u64,
    #[arg(long, default_value_t = 100)]
    max_ms: u64,
    /// Train real networks on this patch set instead of sleeping.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run configuration for real evaluations.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TimingArgs {
    /// Patch set to train on.
    #[arg(long, required_unless_present = "samples")]
    data: Option<PathBuf>,
    /// Analyze epoch times from a CSV with an `epoch_time_s` column instead.
    #[arg(long, conflicts_with = "data")]
    samples: Option<PathBuf>,
    /// Topology to time, in genome text form.
    #[arg(long)]
    genome: Option<String>,
    #[arg(long, default_value_t = 60)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    /// Positive patches; with --neg omitted too, the reference ratio over 4000.
    #[arg(long)]
    pos: Option<usize>,
    #[arg(long)]
    neg: Option<usize>,
    #[arg(long, default_value_t = 24)]
    h: usize,
    #[arg(long, default_value_t = 24)]
    w: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Directory for metrics.json and metrics.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    networks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-6)]
    threshold: f64,
    /// Directory for gradcheck.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WorkerArgs {
    /// Master address, `host:port`.
    #[arg(long)]
    connect: String,
    #[arg(long)]
    id: usize,
    #[command(flatten)]
    run: RunArgs,
}

fn load_config(args: &RunArgs, extra: &[(&str, String)]) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("{}", p.display()))?,
        None => String::new(),
    };
    let mut config = RunConfig::parse(&text)?;
    let mut overrides: Vec<(String, String)> = Vec::new();
    if let Some(d) = &args.data {
        overrides.push(("data.path".into(), d.display().to_string()));
    }
    overrides.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got '{kv}'"))?;
        overrides.push((k.trim().into(), v.trim().into()));
    }
    for (k, v) in overrides {
        config = config.with(&k, &v)?;
    }
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("{}", path.display()))?,
    ))
}

fn training_evaluator(config: &RunConfig) -> Result<TrainingEvaluator> {
    let path = config
        .data_path
        .as_ref()
        .ok_or_else(|| anyhow!("missing required key 'data.path'"))?;
    let set = Arc::new(load_patchset(path)?);
    Ok(TrainingEvaluator {
        splits: stratified_split(set, config.split, config.split_seed)?,
        settings: config.settings,
        objective: config.objective(),
        run_seed: config.seed,
    })
}

fn evolve(args: EvolveArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(o) = &args.out {
        extra.push(("out.dir", o.display().to_string()));
    }
    if let Some(w) = args.workers {
        extra.push(("workers", w.to_string()));
    }
    if let Some(t) = args.transport {
        let name = match t {
            TransportArg::InProcess => "in_process",
            TransportArg::Socket => "socket",
        };
        extra.push(("transport", name.into()));
    }
    if let Some(p) = args.port {
        extra.push(("port", p.to_string()));
    }
    if let Some(t) = args.eval_timeout {
        extra.push(("eval_timeout_s", t.to_string()));
    }
    if args.external_workers {
        extra.push(("spawn_workers", "false".into()));
    }
    let config = load_config(&args.run, &extra)?;
    let out = run(&config)?;
    let m = &out.test_report;
    println!("evaluations {}", out.evaluations);
    println!("best {}", out.best.genome);
    println!(
        "fitness {:.6} val_f1 {:.4} flops {}",
        out.best.record.fitness, out.best.record.val_f1, out.best.record.flops_inference
    );
    println!(
        "test f1 {:.4} auc {} rate {:.1} patches/s",
        m.f1,
        m.auc.map_or_else(|| "n/a".into(), |a| format!("{a:.4}")),
        m.prediction_rate_patches_per_s
    );
    println!("idle fraction {:.3}", out.pool.idle_fraction().aggregate);
    println!("log {}", out.log_path.display());
    println!("model {}", out.model_path.display());
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let grid = match &args.grid_file {
        Some(p) => SweepGrid::parse(&fs::read_to_string(p).with_context(|| format!("{}", p.display()))?)?,
        None => SweepGrid::default(),
    };
    create_dir(&args.out)?;
    let result = sweep_conv(&grid, args.reps, args.seed)?;
    write_sweep_csv(&result.rows, create_file(&args.out.join("sweep.csv"))?)?;
    let skipped: String = result
        .skipped
        .iter()
        .map(|s| format!("{:?}: {}\n", s.config, s.reason))
        .collect();
    fs::write(args.out.join("skipped.txt"), skipped)?;
    if !result.rows.is_empty() {
        let prior = build_prior(&result.rows, args.top_k.min(result.rows.len()), args.beta)?;
        prior.write_csv(create_file(&args.out.join("prior.csv"))?)?;
        let (o, k, s) = prior.mode();
        println!("prior mode out_channels {o} kernel {k} stride {s}");
    }
    println!("{} rows, {} skipped", result.rows.len(), result.skipped.len());
    Ok(())
}

fn bench_scaling(args: ScalingArgs) -> Result<()> {
    if args.min_ms > args.max_ms {
        bail!("--min-ms must not exceed --max-ms");
    }
    let (evaluator, space): (Arc<dyn Evaluator>, SearchSpace) = match &args.data {
        Some(d) => {
            let run = RunArgs {
                config: args.config.clone(),
                data: Some(d.clone()),
                set: Vec::new(),
            };
            let config = load_config(&run, &[])?;
            let ev = training_evaluator(&config)?;
            let space = SearchSpace {
                input_shape: ev.splits.train.set().shape(),
                ..config.space.clone()
            };
            (Arc::new(ev), space)
        }
        None => (
            Arc::new(sleep_stub(
                Duration::from_millis(args.min_ms),
                Duration::from_millis(args.max_ms),
            )),
            SearchSpace::default(),
        ),
    };
    create_dir(&args.out)?;
    let rows = weak_scaling(&args.workers, args.per_worker, evaluator, &space, args.seed)?;
    write_scaling_csv(&rows, create_file(&args.out.join("scaling.csv"))?)?;
    for r in &rows {
        println!(
            "workers {} throughput {:.3}/s efficiency {:.3} bounds [{:.3}, {:.3}]",
            r.workers, r.throughput, r.efficiency, r.lower_bound, r.upper_bound
        );
    }
    Ok(())
}

/// Fixed topology for timing runs.
const TIMING_GENOME: &str = "id=0000000000000001 parents=- lr=0.01 momentum=0.9 batch_size=32 features=3 \
                             f0=conv:16:3:1:relu f1=pool:2:2 f2=conv:32:3:1:relu head=1 h0=dense:32";

fn read_samples(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("{}", path.display()))?;
    let col = r
        .headers()?
        .iter()
        .position(|h| h == "epoch_time_s")
        .ok_or_else(|| anyhow!("{}: no epoch_time_s column", path.display()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v = rec.get(col).unwrap_or("");
        out.push(v.parse().with_context(|| format!("bad epoch time '{v}'"))?);
    }
    Ok(out)
}

fn bench_timing(args: TimingArgs) -> Result<()> {
    create_dir(&args.out)?;
    let samples = match (&args.samples, &args.data) {
        (Some(p), _) => read_samples(p)?,
        (None, Some(d)) => {
            let set = Arc::new(load_patchset(d)?);
            let splits = stratified_split(set, [0.8, 0.1, 0.1], args.seed)?;
            let genome: Genome = args.genome.as_deref().unwrap_or(TIMING_GENOME).parse()?;
            let timed = epoch_times(&genome, &splits.train, args.count, args.workers, args.seed)?;
            let mut w = csv::Writer::from_writer(create_file(&args.out.join("epoch_times.csv"))?);
            for t in &timed {
                w.serialize(t)?;
            }
            w.flush()?;
            timed.iter().map(|t| t.epoch_time_s).collect()
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let report = timing_distribution(&samples)?;
    write_histogram_csv(&report, create_file(&args.out.join("histogram.csv"))?)?;
    fs::write(args.out.join("timing.json"), serde_json::to_string_pretty(&report)?)?;
    let centers: Vec<String> = report.mode_centers.iter().map(|c| format!("{c:.4}")).collect();
    println!(
        "{} samples, {} mode(s) at {} s, separation {:.3}",
        report.samples,
        report.modes,
        centers.join(", "),
        report.separation_stat
    );
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let (pos, neg) = match (args.pos, args.neg) {
        (Some(p), Some(n)) => (p, n),
        (None, None) => reference_counts(4000),
        _ => bail!("--pos and --neg go together"),
    };
    let set = generate_synthetic(pos, neg, args.h, args.w, args.seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_patchset(&set, &args.out)?;
    println!(
        "{} patches ({pos} positive) of {} to {}",
        set.len(),
        set.shape(),
        args.out.display()
    );
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    if args.batch_size == 0 {
        bail!("--batch-size must be at least 1");
    }
    for p in [&args.model, &args.data] {
        if !p.is_file() {
            bail!("{}: no such file", p.display());
        }
    }
    let report = predict_files(&args.model, &args.data, args.batch_size)?;
    if let Some(out) = &args.out {
        create_dir(out)?;
        fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
        fs::write(out.join("metrics.txt"), report.to_text())?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let checks = grad_check_genomes(args.networks, args.seed, args.epsilon)?;
    if let Some(out) = &args.out {
        create_dir(out)?;
        let mut w = csv::Writer::from_writer(create_file(&out.join("gradcheck.csv"))?);
        w.write_record(["genome", "checked", "skipped_kinks", "max_relative_error"])?;
        for c in &checks {
            w.write_record([
                c.genome.to_string(),
                c.report.checked.to_string(),
                c.report.skipped_kinks.to_string(),
                format!("{:e}", c.report.max_relative_error),
            ])?;
        }
        w.flush()?;
    }
    let worst = checks.iter().map(|c| c.report.max_relative_error).fold(0.0, f64::max);
    let checked: usize = checks.iter().map(|c| c.report.checked).sum();
    println!(
        "{} networks, {checked} parameters, max relative error {worst:e}",
        checks.len()
    );
    if worst > args.threshold {
        bail!("max relative error {worst:e} exceeds threshold {:e}", args.threshold);
    }
    Ok(())
}

fn worker(args: WorkerArgs) -> Result<()> {
    let addr: SocketAddr = args
        .connect
        .to_socket_addrs()
        .with_context(|| format!("bad address '{}'", args.connect))?
        .next()
        .ok_or_else(|| anyhow!("'{}' resolves to no address", args.connect))?;
    let config = load_config(&args.run, &[])?;
    let evaluator = training_evaluator(&config)?;
    let done = run_socket_worker(addr, args.id, &evaluator)?;
    println!("worker {} evaluated {done} genomes", args.id);
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Evolve(a) => evolve(a),
        Command::Sweep(a) => sweep(a),
        Command::BenchScaling(a) => bench_scaling(a),
        Command::BenchTiming(a) => bench_timing(a),
        Command::GenData(a) => gen_data(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Worker(a) => worker(a),
    }
}

/// The error chain on one line, skipping causes already spelled out by
/// their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let part = cause.to_string();
        if !text.contains(&part) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&part);
        }
    }
    text.replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", first.trim());
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
