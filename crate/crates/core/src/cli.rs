//! Command-line front end. `main` in the binary only calls [`run`].
//!
//! Exit codes: 0 success, 1 data violation, 2 IO or configuration error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use thiserror::Error;

use crate::datamodel::{
    load_candidates, load_results, save_candidates, save_results, validate_file, write_atomic,
    write_jsonl, CandidateList, DataError, ResultError, StrategyId,
};
use crate::eval::{
    baseline_report, class_stats, histogram_svg, recall_at_k, report_json, reports_csv,
    sweep_csv, sweep_svg, truths_from_lists, EvalReport, DEFAULT_KS,
};
use crate::gateway::{BackendConfig, HttpGateway};
use crate::pointwise::ScoreDumpRecord;
use crate::rerank::{run_rerank, Backend, RunOptions};
use crate::simbackend::{
    baseline_fixture, run_noise_sweep, synthetic_dataset, OracleConfig, Regime,
    SyntheticScoreConfig, DEFAULT_P_GRID,
};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input data: exit code 1.
    #[error("{0}")]
    Data(String),
    /// IO failure or bad configuration: exit code 2.
    #[error("{0}")]
    Config(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => 1,
            CliError::Config(_) => 2,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ResultError> for CliError {
    fn from(e: ResultError) -> Self {
        match e {
            ResultError::Io { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "georerank", version, about = "Rerank cross-view geolocalization candidates with VLM judges and evaluate Recall@k")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a candidate-list file; prints one violation per line.
    Validate(ValidateArgs),
    /// Rerank every query of a candidate-list file.
    Rerank(Box<RerankArgs>),
    /// Compute Recall@k of one or more result files.
    Eval(EvalArgs),
    /// Sweep the flip probability of a simulated pairwise judge.
    Simulate(SimulateArgs),
    /// Summarize correct/incorrect score distributions from a score dump.
    Analyze(AnalyzeArgs),
    /// Write a synthetic candidate-list file.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Candidate-list file (one JSON object per line).
    pub input: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Oracle,
    Synthetic,
}

#[derive(Debug, Args, Default)]
pub struct RerankArgs {
    /// TOML run configuration; command-line flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Candidate-list file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Results file to write.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// One of direct, likert, yesno, reason_yesno, pairwise.
    #[arg(long)]
    pub strategy: Option<StrategyId>,
    /// Judge/scorer implementation.
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Seed for simulated backends.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Oracle backend: probability that a comparison is reported wrong.
    #[arg(long)]
    pub flip_probability: Option<f64>,
    /// Oracle backend: draw a fresh flip per call instead of per pair.
    #[arg(long)]
    pub per_call_noise: bool,
    /// Synthetic backend: constant, separated or overlapping.
    #[arg(long)]
    pub regime: Option<String>,
    /// HTTP backend: chat-completions URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// HTTP backend: model id sent with each request.
    #[arg(long)]
    pub model: Option<String>,
    /// HTTP backend: name of the environment variable holding the bearer token.
    #[arg(long)]
    pub auth_env: Option<String>,
    /// HTTP backend: maximum generated tokens per answer.
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// HTTP backend: number of top log-probabilities requested per token.
    #[arg(long)]
    pub top_logprobs: Option<u32>,
    /// HTTP backend: maximum concurrent requests.
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// HTTP backend: request timeout in seconds.
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    /// HTTP backend: attempts per request including the first.
    #[arg(long)]
    pub retries: Option<u32>,
    /// HTTP backend: downscale images whose longer side exceeds this.
    #[arg(long)]
    pub max_image_dim: Option<u32>,
    /// Directory for the response cache.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Directory relative image paths are resolved against.
    #[arg(long)]
    pub images_root: Option<PathBuf>,
    /// Pointwise: write per-candidate scores here.
    #[arg(long)]
    pub scores_dump: Option<PathBuf>,
    /// Pairwise: write the per-comparison audit log here.
    #[arg(long)]
    pub audit_log: Option<PathBuf>,
    /// Pairwise: ask every comparison in both slot orders.
    #[arg(long)]
    pub swap_consistency: bool,
    /// Worker threads (default 4).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Only rerank the first N queries.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilePaths {
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    images_root: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
    scores_dump: Option<PathBuf>,
    audit_log: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileBackend {
    kind: Option<BackendKind>,
    seed: Option<u64>,
    flip_probability: Option<f64>,
    per_call_noise: Option<bool>,
    regime: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHttp {
    endpoint_url: Option<String>,
    model_id: Option<String>,
    auth_env_var: Option<String>,
    temperature: Option<f64>,
    max_output_tokens: Option<u32>,
    reasoning_max_tokens: Option<u32>,
    logprob_top_n: Option<u32>,
    max_in_flight: Option<usize>,
    timeout_secs: Option<u64>,
    retry_max_attempts: Option<u32>,
    retry_base_backoff_ms: Option<u64>,
    max_image_dim: Option<u32>,
}

/// On-disk run configuration. Secrets never live here; only the name of the
/// environment variable that holds the token.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    strategy: Option<StrategyId>,
    workers: Option<usize>,
    swap_consistency: Option<bool>,
    limit: Option<usize>,
    #[serde(default)]
    paths: FilePaths,
    #[serde(default)]
    backend: FileBackend,
    #[serde(default)]
    http: FileHttp,
}

pub enum BackendSelection {
    Http(BackendConfig),
    Oracle(OracleConfig),
    Synthetic(SyntheticScoreConfig),
}

/// Fully resolved settings for one `rerank` invocation.
pub struct RunConfig {
    pub backend: BackendSelection,
    pub strategy: StrategyId,
    pub input: PathBuf,
    pub output: PathBuf,
    pub images_root: Option<PathBuf>,
    pub scores_dump: Option<PathBuf>,
    pub audit_log: Option<PathBuf>,
    pub workers: usize,
    pub swap_consistency: bool,
    pub limit: Option<usize>,
}

impl RunConfig {
    pub fn resolve(args: &RerankArgs) -> Result<RunConfig, CliError> {
        let file: FileConfig = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
                toml::from_str(&text).map_err(|e| io_error(path, e))?
            }
            None => FileConfig::default(),
        };
        let missing = |what: &str| CliError::Config(format!("missing required setting: {what}"));
        let strategy = args.strategy.or(file.strategy).ok_or_else(|| missing("strategy"))?;
        let kind = args.backend.or(file.backend.kind).ok_or_else(|| missing("backend"))?;
        let seed = args.seed.or(file.backend.seed);
        let cache_dir = args.cache_dir.clone().or(file.paths.cache_dir);
        let backend = match kind {
            BackendKind::Http => {
                let endpoint = args
                    .endpoint
                    .clone()
                    .or(file.http.endpoint_url)
                    .ok_or_else(|| missing("http endpoint"))?;
                let model = args
                    .model
                    .clone()
                    .or(file.http.model_id)
                    .ok_or_else(|| missing("http model id"))?;
                let mut cfg = BackendConfig::new(endpoint, model);
                cfg.auth_env_var = args.auth_env.clone().or(file.http.auth_env_var);
                if let Some(t) = file.http.temperature {
                    cfg.temperature = t;
                }
                if let Some(v) = args.max_tokens.or(file.http.max_output_tokens) {
                    cfg.max_output_tokens = v;
                }
                if let Some(v) = file.http.reasoning_max_tokens {
                    cfg.reasoning_max_tokens = v;
                }
                if let Some(v) = args.top_logprobs.or(file.http.logprob_top_n) {
                    cfg.logprob_top_n = v;
                }
                if let Some(v) = args.max_in_flight.or(file.http.max_in_flight) {
                    cfg.max_in_flight = v;
                }
                if let Some(v) = args.timeout_secs.or(file.http.timeout_secs) {
                    cfg.timeout_secs = v;
                }
                if let Some(v) = args.retries.or(file.http.retry_max_attempts) {
                    cfg.retry_max_attempts = v;
                }
                if let Some(v) = file.http.retry_base_backoff_ms {
                    cfg.retry_base_backoff_ms = v;
                }
                cfg.max_image_dim = args.max_image_dim.or(file.http.max_image_dim);
                cfg.cache_dir = cache_dir;
                BackendSelection::Http(cfg)
            }
            BackendKind::Oracle => {
                let seed = seed.ok_or_else(|| missing("seed (oracle backend)"))?;
                let p = args
                    .flip_probability
                    .or(file.backend.flip_probability)
                    .unwrap_or(0.0);
                let mut cfg = OracleConfig::new(p, seed).map_err(|e| CliError::Config(e.to_string()))?;
                cfg.per_call_noise = args.per_call_noise || file.backend.per_call_noise.unwrap_or(false);
                BackendSelection::Oracle(cfg)
            }
            BackendKind::Synthetic => {
                let seed = seed.ok_or_else(|| missing("seed (synthetic backend)"))?;
                let name = args
                    .regime
                    .clone()
                    .or(file.backend.regime)
                    .ok_or_else(|| missing("regime (synthetic backend)"))?;
                let regime = Regime::parse(&name)
                    .ok_or_else(|| CliError::Config(format!("unknown regime '{name}'")))?;
                let cfg = SyntheticScoreConfig::preset(regime, strategy, seed)
                    .map_err(|e| CliError::Config(e.to_string()))?;
                BackendSelection::Synthetic(cfg)
            }
        };
        let workers = args.workers.or(file.workers).unwrap_or(4);
        if workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        Ok(RunConfig {
            backend,
            strategy,
            input: args.input.clone().or(file.paths.input).ok_or_else(|| missing("input"))?,
            output: args.output.clone().or(file.paths.output).ok_or_else(|| missing("output"))?,
            images_root: args.images_root.clone().or(file.paths.images_root),
            scores_dump: args.scores_dump.clone().or(file.paths.scores_dump),
            audit_log: args.audit_log.clone().or(file.paths.audit_log),
            workers,
            swap_consistency: args.swap_consistency || file.swap_consistency.unwrap_or(false),
            limit: args.limit.or(file.limit),
        })
    }
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<(), CliError> {
    let issues = validate_file(&args.input)?;
    for issue in &issues {
        println!("{issue}");
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{} violation(s) in {}", issues.len(), args.input.display())))
    }
}

pub fn cmd_rerank(args: &RerankArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(args)?;
    let backend = match cfg.backend {
        BackendSelection::Http(ref http) => {
            let needs_logprobs = matches!(
                cfg.strategy,
                StrategyId::Likert | StrategyId::Yesno | StrategyId::ReasonYesno
            );
            Backend::Http(
                HttpGateway::new(http.clone(), needs_logprobs)
                    .map_err(|e| CliError::Config(e.to_string()))?,
            )
        }
        BackendSelection::Oracle(o) => Backend::Oracle(o),
        BackendSelection::Synthetic(ref s) => Backend::Synthetic(s.clone()),
    };
    let mut lists = load_candidates(&cfg.input)?;
    if let Some(n) = cfg.limit {
        lists.truncate(n);
    }
    let opts = RunOptions {
        strategy: cfg.strategy,
        workers: cfg.workers,
        swap_consistency: cfg.swap_consistency,
        images_root: cfg.images_root.clone(),
    };
    let out = run_rerank(&lists, &backend, &opts).map_err(|e| CliError::Config(e.to_string()))?;
    save_results(&out.results, &cfg.output)?;
    if let Some(path) = &cfg.scores_dump {
        write_jsonl(path, &out.scores).map_err(|e| io_error(path, e))?;
    }
    if let Some(path) = &cfg.audit_log {
        write_jsonl(path, &out.audit).map_err(|e| io_error(path, e))?;
    }
    let s = out.summary;
    println!(
        "queries={} comparator_calls={} cache_hits={} fallbacks={} parse_failures={} http_requests={} retries={}",
        s.queries, s.comparator_calls, s.cache_hits, s.fallbacks, s.parse_failures, s.http_requests, s.retries
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Results file(s); one CSV row per file.
    #[arg(long = "pred", required = true)]
    pub preds: Vec<PathBuf>,
    /// Candidate-list file supplying the ground truth.
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS.to_vec())]
    pub ks: Vec<usize>,
    /// Also report the first-stage order as a `baseline` row.
    #[arg(long)]
    pub baseline: bool,
    /// Directory receiving eval.csv and one JSON report per row.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn index_lists(lists: &[CandidateList]) -> BTreeMap<&str, &CandidateList> {
    lists.iter().map(|l| (l.query.id.as_str(), l)).collect()
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Vec<EvalReport>, CliError> {
    let lists = load_candidates(&args.input)?;
    let truths = truths_from_lists(&lists);
    let by_id = index_lists(&lists);
    let mut reports = Vec::new();
    if args.baseline {
        reports.push(baseline_report(&lists, &args.ks).map_err(|e| CliError::Data(e.to_string()))?);
    }
    for pred in &args.preds {
        let results = load_results(pred)?;
        if results.is_empty() {
            return Err(CliError::Data(format!("{}: no results", pred.display())));
        }
        let mut problems = Vec::new();
        for r in &results {
            match by_id.get(r.query_id.as_str()) {
                None => problems.push(format!("query '{}' not in {}", r.query_id, args.input.display())),
                Some(l) => {
                    if let Err(e) = r.check_against(l) {
                        problems.push(e.to_string());
                    }
                }
            }
        }
        if !problems.is_empty() {
            for p in &problems {
                eprintln!("{p}");
            }
            return Err(CliError::Data(format!(
                "{}: {} query id mismatch(es)",
                pred.display(),
                problems.len()
            )));
        }
        reports.push(recall_at_k(&results, &truths, &args.ks).map_err(|e| CliError::Data(e.to_string()))?);
    }
    std::fs::create_dir_all(&args.out_dir).map_err(|e| io_error(&args.out_dir, e))?;
    let mut used = BTreeMap::new();
    for r in &reports {
        let n = used.entry(r.strategy.clone()).or_insert(0usize);
        *n += 1;
        let name = if *n == 1 {
            format!("{}.json", r.strategy)
        } else {
            format!("{}_{}.json", r.strategy, n)
        };
        let path = args.out_dir.join(name);
        let json = report_json(r).map_err(|e| io_error(&path, e))?;
        write_atomic(&path, json.as_bytes()).map_err(|e| io_error(&path, e))?;
    }
    let csv = reports_csv(&reports);
    let path = args.out_dir.join("eval.csv");
    write_atomic(&path, csv.as_bytes()).map_err(|e| io_error(&path, e))?;
    print!("{csv}");
    Ok(reports)
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Comma-separated flip probabilities.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_P_GRID.to_vec())]
    pub grid: Vec<f64>,
    /// Seeds averaged per grid point.
    #[arg(long, default_value_t = 2000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Candidates per query.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// Synthetic queries per trial.
    #[arg(long, default_value_t = 50)]
    pub n_queries: usize,
    /// Draw a fresh flip per call instead of per pair.
    #[arg(long)]
    pub per_call_noise: bool,
    /// Directory receiving sweep.csv, sweep.json and sweep.svg.
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    if args.k == 0 || args.n_queries == 0 {
        return Err(CliError::Config("k and n-queries must be positive".into()));
    }
    let data = synthetic_dataset(args.n_queries, args.k, args.seed);
    let rows = run_noise_sweep(&data, &args.grid, args.trials, args.seed, args.per_call_noise)
        .map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| io_error(&args.out_dir, e))?;
    let csv = sweep_csv(&rows);
    let json = serde_json::to_string_pretty(&rows).expect("plain data") + "\n";
    for (name, body) in [("sweep.csv", &csv), ("sweep.json", &json), ("sweep.svg", &sweep_svg(&rows))] {
        let path = args.out_dir.join(name);
        write_atomic(&path, body.as_bytes()).map_err(|e| io_error(&path, e))?;
    }
    print!("{csv}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Score dump written by `rerank --scores-dump`.
    #[arg(long)]
    pub scores: PathBuf,
    /// Directory receiving <strategy>_summary.json and <strategy>_hist.svg.
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let records: Vec<ScoreDumpRecord> = crate::datamodel::read_jsonl(&args.scores).map_err(|e| match e {
        crate::datamodel::JsonlError::Io(io) => io_error(&args.scores, io),
        other => CliError::Data(format!("{}: {other}", args.scores.display())),
    })?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{}: no score records", args.scores.display())));
    }
    let mut by_strategy: BTreeMap<StrategyId, Vec<(f64, bool)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.valid) {
        by_strategy.entry(r.strategy).or_default().push((r.value, r.is_ground_truth));
    }
    std::fs::create_dir_all(&args.out_dir).map_err(|e| io_error(&args.out_dir, e))?;
    for (strategy, scores) in by_strategy {
        let range = strategy
            .score_range()
            .ok_or_else(|| CliError::Data(format!("strategy {strategy} has no score range")))?;
        let summary = class_stats(strategy.as_str(), &scores, range).map_err(|e| CliError::Data(e.to_string()))?;
        if summary.correct.count == 0 {
            eprintln!("warning: {strategy}: no valid scores for correct candidates");
        }
        if summary.incorrect.count == 0 {
            eprintln!("warning: {strategy}: no valid scores for incorrect candidates");
        }
        let json = serde_json::to_string_pretty(&summary).expect("plain data") + "\n";
        let json_path = args.out_dir.join(format!("{strategy}_summary.json"));
        write_atomic(&json_path, json.as_bytes()).map_err(|e| io_error(&json_path, e))?;
        let svg_path = args.out_dir.join(format!("{strategy}_hist.svg"));
        write_atomic(&svg_path, histogram_svg(&summary).as_bytes()).map_err(|e| io_error(&svg_path, e))?;
        let overlap = summary
            .overlap_coefficient
            .map(|o| format!("{o:.4}"))
            .unwrap_or_else(|| "n/a".into());
        println!("{strategy}: correct={} incorrect={} overlap={overlap}", summary.correct.count, summary.incorrect.count);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DatasetKind {
    /// 500 queries with the fixed baseline hit counts 306/369/412 at k=1/3/5.
    Baseline,
    /// Ground truth at a uniformly random position.
    Random,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value_t = DatasetKind::Random)]
    pub kind: DatasetKind,
    /// Random kind only.
    #[arg(long, default_value_t = 500)]
    pub n_queries: usize,
    /// Random kind only.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let lists = match args.kind {
        DatasetKind::Baseline => baseline_fixture(args.seed),
        DatasetKind::Random => synthetic_dataset(args.n_queries, args.k, args.seed),
    };
    save_candidates(&lists, &args.output).map_err(|e| io_error(&args.output, e))
}

/// Parses `argv`, runs the command, and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match &cli.command {
        Command::Validate(a) => cmd_validate(a),
        Command::Rerank(a) => cmd_rerank(a),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
