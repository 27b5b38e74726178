//! `streameval`: command-line front end for the streaming evaluation harness.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration as StdDuration;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;

use streameval::budget::{
    effective_memory, load_profiles, memory_cost, per_token_bytes, select_profile, token_cap,
    ByteBudget, ModelProfile,
};
use streameval::conformance::{
    all_passed, check_bundled_corpus, run_worker_suite, CheckResult, SuiteConfig, WorkerHandle,
};
use streameval::metrics::{
    load_records, measure_e2e, measure_ttft, probe_max_fps, record_from_log, records_to_jsonl,
    Aggregation, FactoryError, LogScoring, McqScorer, ProbeConfig, ProbeError, Scenario, Weights,
};
use streameval::mock::MockWorker;
use streameval::protocol::{spawn_worker, Mode, WorkerLink};
use streameval::report::{
    build_leaderboard, emit_report, emit_stability, rank_stability, NamedWeights, ReportFormat,
};
use streameval::session::{
    ingest_manifests, load_query_manifest, run_session, EventLog, SessionConfig, SessionError,
    SessionOutcome,
};
use streameval::time::ClockKind;

mod worker;

use worker::{ensure_single_worker, load_mock_config, MockOverrides, WorkerArgs, WorkerSource};

/// Environment variable naming the default directory for event logs.
const OUT_DIR_ENV: &str = "STREAMEVAL_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "streameval",
    version,
    about = "Time-causal evaluation harness for streaming video LLMs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Token capacity of a byte budget for one model profile.
    Budget(BudgetArgs),
    /// Run one streaming session and write its event log.
    Run(RunArgs),
    /// Find the highest frame rate a worker sustains.
    ProbeMaxfps(ProbeArgs),
    /// Turn an event log into a metrics record and composite score.
    Score(ScoreArgs),
    /// Rank metrics records under one or more weightings.
    Report(ReportArgs),
    /// Check the protocol corpus and, optionally, a worker.
    Conformance(ConformanceArgs),
    /// Serve the built-in mock worker on stdio or TCP.
    MockWorker(MockWorkerArgs),
}

#[derive(Debug, clap::Args)]
struct ProfileArgs {
    /// Model profile file (TOML, one [[model]] table per model).
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Which profile to use when the file has several.
    #[arg(long)]
    model: Option<String>,
    /// Memory budget, e.g. `0.5GB` or `500000000`.
    #[arg(long)]
    budget: Option<ByteBudget>,
}

impl ProfileArgs {
    fn resolve(&self) -> anyhow::Result<Option<(ModelProfile, ByteBudget)>> {
        match (&self.profile, self.budget) {
            (None, None) => {
                if self.model.is_some() {
                    bail!("--model needs --profile");
                }
                Ok(None)
            }
            (Some(path), Some(budget)) => {
                let profiles = load_profiles(path)?;
                Ok(Some((
                    select_profile(profiles, self.model.as_deref())?,
                    budget,
                )))
            }
            (Some(_), None) => bail!("--profile needs --budget"),
            (None, Some(_)) => bail!("--budget needs --profile"),
        }
    }
}

#[derive(Debug, clap::Args)]
struct BudgetArgs {
    #[command(flatten)]
    profile: ProfileArgs,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Stream manifest (JSONL).
    #[arg(long)]
    stream: PathBuf,
    /// Query manifest (JSONL).
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Resample the stream to this rate.
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long, default_value = "native")]
    mode: Mode,
    #[arg(long, default_value = "virtual")]
    clock: ClockKind,
    #[command(flatten)]
    profile: ProfileArgs,
    #[command(flatten)]
    worker: WorkerArgs,
    /// Session id; defaults to the stream file stem.
    #[arg(long)]
    session_id: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Abort when this many frames await encoding.
    #[arg(long)]
    max_queue: Option<u64>,
    /// Send earlier question/answer turns with each query.
    #[arg(long)]
    dialogue_context: bool,
    /// Extra `key=value` entries for the hello config.
    #[arg(long = "worker-opt", value_parser = parse_key_value)]
    worker_opts: Vec<(String, String)>,
    /// Event log path. Defaults to `<session>.events.jsonl` in $STREAMEVAL_OUT_DIR
    /// or the current directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct ProbeArgs {
    #[command(flatten)]
    worker: WorkerArgs,
    /// Length of each fixed-rate trial, in seconds.
    #[arg(long, default_value_t = 60.0)]
    trial_duration: f64,
    /// Largest backlog a sustainable trial may reach.
    #[arg(long, default_value_t = 3)]
    max_backlog: u64,
    #[arg(long, default_value = "virtual")]
    clock: ClockKind,
}

#[derive(Debug, clap::Args)]
struct WeightArgs {
    /// Named weighting: equal, best-answer, interaction-first, resource-saving,
    /// throughput-first.
    #[arg(long, conflicts_with = "weights")]
    scenario: Option<Scenario>,
    /// Explicit weights `f,a,t,r` summing to 1.
    #[arg(long)]
    weights: Option<Weights>,
}

impl WeightArgs {
    fn resolve(&self) -> NamedWeights {
        match (self.scenario, self.weights) {
            (_, Some(w)) => NamedWeights::new(format!("custom({w})"), w),
            (Some(s), None) => s.into(),
            (None, None) => Scenario::Equal.into(),
        }
    }
}

#[derive(Debug, clap::Args)]
struct ScoreArgs {
    /// Event log written by `run`.
    #[arg(long)]
    log: PathBuf,
    /// Measured MaxFPS for this model.
    #[arg(long)]
    max_fps: f64,
    /// Model id; defaults to the profile named in the log.
    #[arg(long)]
    model_id: Option<String>,
    /// Memory in GB; defaults to the budget in the log.
    #[arg(long)]
    mem_gb: Option<f64>,
    /// Parameters in billions; defaults to the profile in the log.
    #[arg(long)]
    params: Option<f64>,
    #[arg(long, default_value = "subtask")]
    aggregation: Aggregation,
    #[command(flatten)]
    weights: WeightArgs,
    /// Append the record to this records file.
    #[arg(long)]
    append: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct ReportArgs {
    /// Records files (JSONL, one metrics record per line).
    #[arg(long = "records", required = true)]
    records: Vec<PathBuf>,
    /// Weightings to rank under, in column order. Defaults to all scenarios.
    #[arg(long = "scenario")]
    scenarios: Vec<Scenario>,
    /// Extra weightings as `name=f,a,t,r`.
    #[arg(long = "weights", value_parser = parse_named_weights)]
    weights: Vec<NamedWeights>,
    #[arg(long, default_value = "markdown")]
    format: ReportFormat,
    /// Dataset label carried into the report.
    #[arg(long, default_value = "")]
    dataset: String,
    /// Also emit pairwise rank correlations between weightings.
    #[arg(long)]
    stability: bool,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct ConformanceArgs {
    /// Worker to test, started fresh for every scenario.
    #[arg(long)]
    worker_cmd: Option<String>,
    /// Per-scenario limit in seconds.
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
    /// Print passing checks too.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Debug, clap::Args)]
struct MockWorkerArgs {
    /// Mock settings (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    mock: MockOverrides,
    /// Query manifest supplying gold labels for the oracle policy.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Listen on this TCP address instead of stdio.
    #[arg(long)]
    listen: Option<String>,
    /// With --listen, keep accepting sessions after the first.
    #[arg(long, requires = "listen")]
    keep_listening: bool,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

fn parse_named_weights(s: &str) -> Result<NamedWeights, String> {
    let (name, w) = s
        .split_once('=')
        .ok_or_else(|| format!("expected name=f,a,t,r, got `{s}`"))?;
    let w: Weights = w.parse().map_err(|e| format!("{e}"))?;
    Ok(NamedWeights::new(name, w))
}

/// An error paired with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

fn fail(code: u8, error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code,
        error: error.into(),
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Budget(a) => budget(a),
        Command::Run(a) => run(a),
        Command::ProbeMaxfps(a) => probe(a),
        Command::Score(a) => score(a),
        Command::Report(a) => report(a),
        Command::Conformance(a) => conformance(a),
        Command::MockWorker(a) => mock_worker(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn budget(a: BudgetArgs) -> CliResult {
    let (profile, budget) = a
        .profile
        .resolve()?
        .ok_or_else(|| anyhow!("budget needs --profile and --budget"))?;
    let cap = token_cap(budget, &profile);
    println!("model: {}", profile.model_id());
    println!("per_token_bytes: {}", per_token_bytes(&profile));
    println!("budget_bytes: {}", budget.bytes());
    println!("token_cap: {cap}");
    println!("memory_cost_at_cap: {}", memory_cost(cap, &profile));
    println!(
        "effective_memory: {:.4}",
        effective_memory(budget.gb(), profile.params_billions()).map_err(anyhow::Error::from)?
    );
    Ok(())
}

fn default_log_path(session_id: &str) -> PathBuf {
    let dir = std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_default();
    dir.join(format!("{session_id}.events.jsonl"))
}

fn write_log(log: &EventLog, path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    log.write_to(path)
        .with_context(|| format!("cannot write {}", path.display()))
}

fn session_summary(out: &SessionOutcome, path: &Path) -> serde_json::Value {
    let ttft = measure_ttft(&out.log);
    let e2e = measure_e2e(&out.log);
    json!({
        "log": path.display().to_string(),
        "session_id": out.log.header.session_id,
        "frames": out.log.header.frames,
        "queries": ttft.per_query.len() + ttft.unanswered,
        "answered": ttft.per_query.len(),
        "ttft_s": ttft.stats,
        "e2e_s": e2e.stats,
        "max_backlog": out.log.max_backlog(),
        "worker": out.worker.as_ref().map(|w| w.worker_name.clone()),
    })
}

fn run(a: RunArgs) -> CliResult {
    let plan =
        ingest_manifests(&a.stream, a.queries.as_deref(), a.fps).map_err(anyhow::Error::from)?;
    let session_id = a.session_id.clone().unwrap_or_else(|| {
        a.stream
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "session".into())
    });
    let mut config = SessionConfig::new(session_id.clone(), a.mode, a.clock);
    if let Some((profile, budget)) = a.profile.resolve()? {
        config = config.with_budget(profile, budget);
    }
    config.seed = a.seed;
    if let Some(q) = a.max_queue {
        config.max_queue = q;
    }
    config.dialogue_context = a.dialogue_context;
    config.worker_config = a.worker_opts.into_iter().collect();

    let answers: BTreeMap<String, String> = plan
        .queries
        .iter()
        .map(|q| (q.query_id.clone(), q.gold.clone()))
        .collect();
    let source = WorkerSource::resolve(&a.worker, a.clock, answers)?;
    let (link, guard) = source
        .start()
        .map_err(|e| fail(3, anyhow!("cannot start worker: {e}")))?;
    let path = a
        .out
        .clone()
        .unwrap_or_else(|| default_log_path(&session_id));
    let result = run_session(&config, &plan, link);
    guard.finish(StdDuration::from_secs(5));
    match result {
        Ok(out) => {
            write_log(&out.log, &path)?;
            println!("{}", session_summary(&out, &path));
            Ok(())
        }
        Err(SessionError::Aborted { reason, partial }) => {
            write_log(&partial.log, &path)?;
            eprintln!("partial event log written to {}", path.display());
            let e = SessionError::Aborted { reason, partial };
            Err(fail(e.exit_code() as u8, e))
        }
        Err(e) => Err(fail(e.exit_code() as u8, e)),
    }
}

fn probe(a: ProbeArgs) -> CliResult {
    ensure_single_worker(&a.worker)?;
    let source = WorkerSource::resolve(&a.worker, a.clock, BTreeMap::new())?;
    let config = ProbeConfig {
        trial_duration_s: a.trial_duration,
        max_backlog: a.max_backlog,
        clock: a.clock,
    };
    let mut previous = None;
    let factory = || -> Result<WorkerLink, FactoryError> {
        if let Some(g) = previous.take() {
            worker::WorkerGuard::finish(g, StdDuration::from_secs(5));
        }
        let (link, guard) = source.start()?;
        previous = Some(guard);
        Ok(link)
    };
    let result = probe_max_fps(factory, &config);
    let result = match result {
        Ok(r) => r,
        Err(ProbeError::Trial { fps, source }) => {
            let code = source.exit_code() as u8;
            return Err(fail(code, anyhow!("trial at {fps} fps: {source}")));
        }
        Err(e @ ProbeError::Factory(_)) => return Err(fail(3, e)),
        Err(e) => return Err(fail(1, e)),
    };
    for t in &result.trials {
        log::info!(
            "trial {} fps: max backlog {}, terminal {}, {}",
            t.fps,
            t.max_backlog,
            t.terminal_backlog,
            if t.sustainable {
                "sustained"
            } else {
                "not sustained"
            }
        );
    }
    eprintln!("max fps: {}", result.outcome);
    println!(
        "{}",
        serde_json::to_string(&result).expect("probe result serializes")
    );
    Ok(())
}

fn score(a: ScoreArgs) -> CliResult {
    let log = EventLog::read_from(&a.log)
        .with_context(|| format!("cannot read event log {}", a.log.display()))?;
    let scoring = LogScoring {
        model_id: a.model_id.clone(),
        max_fps: a.max_fps,
        mem_gb: a.mem_gb,
        params_billions: a.params,
        aggregation: a.aggregation,
    };
    let record = record_from_log(&log, &scoring, &McqScorer).map_err(anyhow::Error::from)?;
    let weights = a.weights.resolve();
    let s = record
        .streaming_score(&weights.weights)
        .context("cannot score record")?;
    if let Some(path) = &a.append {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("cannot open {}", path.display()))?;
        f.write_all(records_to_jsonl(std::slice::from_ref(&record)).as_bytes())
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    if s.zero_accuracy {
        eprintln!("warning: accuracy is zero, so the score is zero");
    }
    println!(
        "{}",
        json!({
            "record": record,
            "weighting": weights.name,
            "weights": weights.weights.to_string(),
            "streaming_score": s.value,
            "zero_accuracy": s.zero_accuracy,
        })
    );
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    let mut records = Vec::new();
    for p in &a.records {
        records.extend(load_records(p).map_err(anyhow::Error::from)?);
    }
    let mut weightings: Vec<NamedWeights> = a.scenarios.iter().map(|s| (*s).into()).collect();
    weightings.extend(a.weights.iter().cloned());
    if weightings.is_empty() {
        weightings = NamedWeights::all_scenarios();
    }
    let lb =
        build_leaderboard(&records, weightings, a.dataset.clone()).map_err(anyhow::Error::from)?;
    let mut text = emit_report(&lb, a.format);
    if a.stability {
        let pairs = rank_stability(&lb).map_err(anyhow::Error::from)?;
        if a.format == ReportFormat::Markdown {
            text.push('\n');
        }
        text.push_str(&emit_stability(&pairs, a.format));
    }
    match &a.out {
        Some(p) => {
            std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))?
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn conformance(a: ConformanceArgs) -> CliResult {
    if !(a.timeout.is_finite() && a.timeout > 0.0) {
        return Err(anyhow!("--timeout must be positive").into());
    }
    let mut results = check_bundled_corpus();
    let corpus_count = results.len();
    if let Some(cmd) = &a.worker_cmd {
        let factory = || -> Result<WorkerHandle, FactoryError> {
            let (link, child) = spawn_worker(cmd)?;
            Ok(WorkerHandle {
                link,
                child: Some(child),
            })
        };
        let config = SuiteConfig {
            timeout: StdDuration::from_secs_f64(a.timeout),
        };
        results.extend(run_worker_suite(factory, &config));
    }
    let print = |r: &CheckResult| a.verbose || !r.passed || r.name.starts_with("worker:");
    for r in results.iter().filter(|r| print(r)) {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let corpus_failed = results[..corpus_count].iter().filter(|r| !r.passed).count();
    println!(
        "corpus: {}/{corpus_count} passed",
        corpus_count - corpus_failed
    );
    println!(
        "conformance: {}/{} checks passed",
        results.len() - failed,
        results.len()
    );
    if all_passed(&results) {
        Ok(())
    } else {
        Err(fail(2, anyhow!("{failed} conformance checks failed")))
    }
}

fn mock_worker(a: MockWorkerArgs) -> CliResult {
    let config = load_mock_config(a.config.as_ref(), &a.mock)?;
    let answers: BTreeMap<String, String> = match &a.queries {
        Some(p) => load_query_manifest(p)
            .map_err(anyhow::Error::from)?
            .into_iter()
            .map(|q| (q.query_id, q.gold))
            .collect(),
        None => BTreeMap::new(),
    };
    let serve = |link: WorkerLink| -> CliResult {
        MockWorker::with_answer_key(config.clone(), answers.clone())
            .map_err(anyhow::Error::from)?
            .serve(link)
            .map_err(|e| fail(3, e))
    };
    match &a.listen {
        None => {
            let stdin = std::io::BufReader::new(std::io::stdin());
            serve(WorkerLink::from_io(stdin, std::io::stdout()))
        }
        Some(addr) => {
            let listener =
                TcpListener::bind(addr).with_context(|| format!("cannot listen on {addr}"))?;
            let local = listener.local_addr().context("listener address")?;
            eprintln!("mock worker listening on {local}");
            loop {
                let (stream, peer) = listener.accept().context("accept failed")?;
                log::info!("session from {peer}");
                stream.set_nodelay(true).context("socket option")?;
                let reader = std::io::BufReader::new(stream.try_clone().context("socket clone")?);
                let result = serve(WorkerLink::from_io(reader, stream));
                if !a.keep_listening {
                    return result;
                }
                if let Err(f) = result {
                    eprintln!("session from {peer} failed: {:#}", f.error);
                }
            }
        }
    }
}
