//! The `genir` command line.
//!
//! Exit codes: 0 success, 1 usage or missing input, 2 input parse error,
//! 3 write failure, 4 model backend unreachable, 5 output exists and
//! `--force` was not given.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use genir_core::curation::{
    curate, read_trajectories, records_from_trace, write_trajectories, CurationError, CurationJob,
    TrajectoryRecord,
};
use genir_core::eval::{
    compare_modes, hits_curve, latency_report, EvalError, HitsConvention, HybridReport,
    LatencySample, SessionOutcome, DEFAULT_VISUAL_FRACTION,
};
use genir_core::gateway::payload::encode_vector_png;
use genir_core::gateway::{Gateway, GatewayError, ImageOrigin};
use genir_core::index::{build_index, load_index, save_index, IndexError};
use genir_core::rng::stable_hash64;
use genir_core::session::{
    DatabaseImages, Engine, FeedbackMode, MemoryImageStore, SessionConfig,
    SessionStatus,
};
use genir_core::IndexSnapshot;

use crate::api::{router, AppState};
use crate::backend_server::backend_router;
use crate::config::{BackendKind, ServiceConfig};
use crate::embeddings::{read_embeddings, write_embeddings, CsvError};

#[derive(Debug, Parser)]
#[command(name = "genir", version, about = "Interactive generative image retrieval")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for session ids, channel draws and target sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing output.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build or inspect index files.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Run agent-driven sessions and write their rounds as trajectory records.
    Simulate(SimulateArgs),
    /// Produce a trajectory dataset with synthetic images and a manifest.
    Curate(CurateArgs),
    /// Metrics over trajectory files.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the HTTP session service.
    Serve(ServeArgs),
    /// Mock world utilities.
    #[command(subcommand)]
    Mock(MockCommand),
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Build an index file from a CSV of `id,f1,...,fd` rows.
    Build {
        input: PathBuf,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Print the size and dimension of an index file.
    Info { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Generative,
    Verbal,
    Prediction,
    HybridRandom,
}

impl ModeArg {
    fn feedback(self, visual_fraction: f64) -> FeedbackMode {
        match self {
            ModeArg::Generative => FeedbackMode::GENERATIVE,
            ModeArg::Verbal => FeedbackMode::VERBAL,
            ModeArg::Prediction => FeedbackMode::PREDICTION,
            ModeArg::HybridRandom => FeedbackMode::hybrid_random(visual_fraction),
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Index file; the configured index or mock database otherwise.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "generative")]
    pub mode: ModeArg,
    /// Visual share for hybrid_random.
    #[arg(long, default_value_t = DEFAULT_VISUAL_FRACTION)]
    pub visual_fraction: f64,
    /// File with one target id per line.
    #[arg(long, conflicts_with = "num_targets")]
    pub targets: Option<PathBuf>,
    /// Number of targets sampled from the index.
    #[arg(long, default_value_t = 100)]
    pub num_targets: usize,
    #[arg(long, default_value_t = 10)]
    pub max_rounds: u32,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Stop each session once the target is in the top K.
    #[arg(long)]
    pub stop_on_success: bool,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
    #[arg(long, default_value = "images")]
    pub image_subdir: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    Cumulative,
    PerRound,
}

impl From<ConventionArg> for HitsConvention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::Cumulative => HitsConvention::Cumulative,
            ConventionArg::PerRound => HitsConvention::PerRound,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Hits@K per dialog length, one CSV column per mode.
    Hits {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, value_enum, default_value = "cumulative")]
        convention: ConventionArg,
    },
    /// Verbal, visual, oracle and random-select rates as JSON.
    Hybrid {
        #[arg(long)]
        verbal: PathBuf,
        #[arg(long)]
        visual: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VISUAL_FRACTION)]
        p: f64,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, value_enum, default_value = "cumulative")]
        convention: ConventionArg,
        /// Emit the table as CSV instead of JSON.
        #[arg(long)]
        csv: bool,
    },
    /// Per-stage latency statistics per mode, as JSON.
    Latency {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Count agent time in the per-round compute time.
        #[arg(long)]
        include_agent: bool,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Overrides `listen_address`.
    #[arg(long)]
    pub listen: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum MockCommand {
    /// Write the mock database as embeddings.csv, index.genir and PNG images.
    Init {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Serve the mock world over the model wire protocol.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8090")]
        listen: String,
    },
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub const USAGE: i32 = 1;
    pub const PARSE: i32 = 2;
    pub const WRITE: i32 = 3;
    pub const BACKEND: i32 = 4;
    pub const EXISTS: i32 = 5;

    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(Self::USAGE, message)
    }

    fn write(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::new(Self::WRITE, format!("writing {}: {e}", path.display()))
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::usage(format!("{e:#}"))
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Failure::USAGE } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(cli: Cli) -> CliResult {
    let mut cfg = ServiceConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = Output {
        path: cli.out.clone(),
        force: cli.force,
    };
    match cli.command {
        Command::Index(IndexCommand::Build { input, dim }) => index_build(&input, dim, &out),
        Command::Index(IndexCommand::Info { path }) => index_info(&path),
        Command::Simulate(args) => simulate(&cfg, &args, &out),
        Command::Curate(args) => curate_cmd(&cfg, &args, &out),
        Command::Eval(cmd) => eval_cmd(cmd, &out),
        Command::Serve(args) => serve(cfg, args),
        Command::Mock(MockCommand::Init { n }) => mock_init(&cfg, n, &out),
        Command::Mock(MockCommand::Serve { listen }) => mock_serve(&cfg, &listen),
    }
}

struct Output {
    path: Option<PathBuf>,
    force: bool,
}

impl Output {
    fn required(&self) -> CliResult<&Path> {
        self.path
            .as_deref()
            .ok_or_else(|| Failure::usage("--out is required for this command"))
    }

    /// Refuses to clobber an existing file, or a non-empty directory,
    /// without `--force`.
    fn check(&self, path: &Path) -> CliResult {
        let occupied = if path.is_dir() {
            fs::read_dir(path)
                .map(|mut d| d.next().is_some())
                .unwrap_or(true)
        } else {
            path.exists()
        };
        if occupied && !self.force {
            return Err(Failure::new(
                Failure::EXISTS,
                format!("{} exists (use --force to overwrite)", path.display()),
            ));
        }
        Ok(())
    }

    /// Writes `text` to `--out`, or stdout when no path was given.
    fn emit(&self, text: &str) -> CliResult {
        match &self.path {
            Some(p) => {
                self.check(p)?;
                fs::write(p, text).map_err(|e| Failure::write(p, e))
            }
            None => {
                let mut stdout = io::stdout().lock();
                stdout
                    .write_all(text.as_bytes())
                    .map_err(|e| Failure::write(Path::new("<stdout>"), e))
            }
        }
    }
}

fn index_build(input: &Path, dim: Option<usize>, out: &Output) -> CliResult {
    let path = out.required()?;
    let f = File::open(input)
        .map_err(|e| Failure::usage(format!("cannot open {}: {e}", input.display())))?;
    let (records, dim) = read_embeddings(BufReader::new(f), dim).map_err(|e| match e {
        CsvError::Parse { .. } | CsvError::Empty => {
            Failure::new(Failure::PARSE, format!("{}: {e}", input.display()))
        }
        CsvError::Csv(e) => Failure::new(Failure::PARSE, format!("{}: {e}", input.display())),
    })?;
    let index = build_index(records, dim).map_err(|e| {
        Failure::new(Failure::PARSE, format!("{}: {e}", input.display()))
    })?;
    out.check(path)?;
    save_index(&index, path).map_err(|e| Failure::write(path, e))?;
    println!("wrote {} records of dim {} to {}", index.len(), index.dim(), path.display());
    Ok(())
}

fn index_info(path: &Path) -> CliResult {
    let index = load_index(path).map_err(|e| match e {
        IndexError::Io(e) if e.kind() == io::ErrorKind::NotFound => {
            Failure::usage(format!("{} not found", path.display()))
        }
        other => Failure::new(Failure::PARSE, format!("{}: {other}", path.display())),
    })?;
    println!("count: {}\ndim: {}", index.len(), index.dim());
    Ok(())
}

struct World {
    index: Arc<IndexSnapshot>,
    gateway: Gateway,
    database: Arc<dyn DatabaseImages>,
}

fn world(cfg: &ServiceConfig, index_override: Option<&Path>) -> CliResult<World> {
    let mut cfg = cfg.clone();
    if let Some(p) = index_override {
        if !p.exists() {
            return Err(Failure::usage(format!("index {} not found", p.display())));
        }
        cfg.index_path = Some(p.to_path_buf());
    }
    let index = cfg.load_index()?;
    let gateway = cfg.gateway(index.dim())?;
    if cfg.backend == BackendKind::Http {
        probe(&gateway)?;
    }
    Ok(World {
        index: Arc::new(index),
        gateway,
        database: cfg.database_images(),
    })
}

/// Fails fast with exit code 4 when the embedder cannot be reached.
fn probe(gateway: &Gateway) -> CliResult {
    match gateway.embed_text("connectivity check") {
        Err(e @ (GatewayError::BackendUnavailable { .. } | GatewayError::BackendTimeout { .. })) => {
            Err(Failure::new(Failure::BACKEND, e.to_string()))
        }
        _ => Ok(()),
    }
}

/// Targets from `--targets`, else a seeded sample of the index.
fn targets(args: &RunArgs, index: &IndexSnapshot, seed: u64) -> CliResult<Vec<String>> {
    if let Some(path) = &args.targets {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
        let ids: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if ids.is_empty() {
            return Err(Failure::usage(format!("{} lists no targets", path.display())));
        }
        return Ok(ids);
    }
    if args.num_targets == 0 || args.num_targets > index.len() {
        return Err(Failure::usage(format!(
            "--num-targets must be between 1 and the index size {}",
            index.len()
        )));
    }
    let mut ids: Vec<(u64, &str)> = index
        .ids()
        .map(|id| (stable_hash64(&[b"target", &seed.to_le_bytes(), id.as_bytes()]), id))
        .collect();
    ids.sort_unstable();
    let mut chosen: Vec<String> = ids[..args.num_targets]
        .iter()
        .map(|(_, id)| id.to_string())
        .collect();
    chosen.sort();
    Ok(chosen)
}

fn session_config(args: &RunArgs, interactive: bool) -> SessionConfig {
    let mode = args.mode.feedback(args.visual_fraction);
    let base = if interactive {
        SessionConfig::interactive(mode)
    } else {
        SessionConfig::curation(mode)
    };
    SessionConfig {
        k: args.k,
        max_rounds: args.max_rounds,
        ..base
    }
}

fn simulate(cfg: &ServiceConfig, args: &SimulateArgs, out: &Output) -> CliResult {
    if let Some(p) = &out.path {
        out.check(p)?;
    }
    let w = world(cfg, args.run.index.as_deref())?;
    let ids = targets(&args.run, &w.index, cfg.seed)?;
    let config = session_config(&args.run, args.stop_on_success);
    config
        .validate(w.index.len())
        .map_err(Failure::usage)?;
    let engine = Engine::new(w.index, w.gateway, Arc::new(MemoryImageStore::new()), w.database)
        .map_err(|e| Failure::usage(e.to_string()))?
        .with_clock(cfg.latency_clock())
        .with_seed(cfg.seed);
    let mut records: Vec<TrajectoryRecord> = Vec::new();
    let mut errored = 0;
    for id in &ids {
        let trace = engine
            .run_simulated_session(config, id)
            .map_err(|e| Failure::usage(e.to_string()))?;
        if trace.status == SessionStatus::Errored {
            errored += 1;
        }
        records.extend(records_from_trace(&trace));
    }
    let mut buf = Vec::new();
    write_trajectories(&mut buf, &records).map_err(|e| Failure::write(Path::new("<buffer>"), e))?;
    out.emit(&String::from_utf8_lossy(&buf))?;
    info!("{} sessions, {} rounds, {errored} errored", ids.len(), records.len());
    if errored == ids.len() {
        return Err(Failure::new(Failure::BACKEND, "every session failed"));
    }
    Ok(())
}

fn curate_cmd(cfg: &ServiceConfig, args: &CurateArgs, out: &Output) -> CliResult {
    let dir = out.required()?;
    out.check(dir)?;
    let w = world(cfg, args.run.index.as_deref())?;
    let ids = targets(&args.run, &w.index, cfg.seed)?;
    if out.force {
        let images = dir.join(&args.image_subdir);
        if images.is_dir() {
            fs::remove_dir_all(&images).map_err(|e| Failure::write(&images, e))?;
        }
    }
    let mut job = CurationJob::new(ids, session_config(&args.run, false), dir.to_path_buf());
    job.image_subdir = args.image_subdir.clone();
    job.parallelism = args.parallelism;
    job.seed = cfg.seed;
    job.clock = cfg.latency_clock();
    let manifest = curate(&job, w.index, w.gateway, w.database).map_err(|e| match e {
        CurationError::Io(e) => Failure::write(dir, e),
        CurationError::TooManyFailures { .. } => Failure::new(Failure::BACKEND, e.to_string()),
        other => Failure::usage(other.to_string()),
    })?;
    println!(
        "wrote {} records for {} targets ({} failed) to {}",
        manifest.records_written,
        manifest.targets_total,
        manifest.targets_failed.len(),
        dir.display()
    );
    Ok(())
}

fn load_records(path: &Path) -> CliResult<Vec<TrajectoryRecord>> {
    if !path.is_file() {
        return Err(Failure::usage(format!(
            "trajectory file {} not found",
            path.display()
        )));
    }
    read_trajectories(path).map_err(|e| match e {
        CurationError::Io(e) => Failure::usage(format!("{}: {e}", path.display())),
        other => Failure::new(Failure::PARSE, format!("{}: {other}", path.display())),
    })
}

fn eval_failure(e: EvalError) -> Failure {
    Failure::usage(e.to_string())
}

fn eval_cmd(cmd: EvalCommand, out: &Output) -> CliResult {
    match cmd {
        EvalCommand::Hits {
            inputs,
            k,
            convention,
        } => {
            let mut records = Vec::new();
            for p in &inputs {
                records.extend(load_records(p)?);
            }
            let outcomes = SessionOutcome::from_records(&records);
            let mut modes: Vec<String> = outcomes.iter().map(|o| o.mode.clone()).collect();
            modes.sort();
            modes.dedup();
            let curves = modes
                .into_iter()
                .map(|m| {
                    let of_mode: Vec<_> = outcomes.iter().filter(|o| o.mode == m).cloned().collect();
                    hits_curve(&of_mode, k, convention.into()).map(|c| (m, c))
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(eval_failure)?;
            out.emit(&compare_modes(&curves).map_err(eval_failure)?)
        }
        EvalCommand::Hybrid {
            verbal,
            visual,
            p,
            k,
            convention,
            csv,
        } => {
            let verbal = SessionOutcome::from_records(&load_records(&verbal)?);
            let visual = SessionOutcome::from_records(&load_records(&visual)?);
            let report = HybridReport::build(&verbal, &visual, k, convention.into(), p)
                .map_err(eval_failure)?;
            if csv {
                out.emit(&report.to_csv())
            } else {
                let doc = serde_json::json!({ "report": report, "table": report.rows() });
                out.emit(&(serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"))
            }
        }
        EvalCommand::Latency {
            inputs,
            include_agent,
        } => {
            let mut samples = Vec::new();
            for p in &inputs {
                samples.extend(LatencySample::from_records(&load_records(p)?));
            }
            let report = latency_report(&samples, include_agent).map_err(eval_failure)?;
            out.emit(&(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))
        }
    }
}

fn runtime() -> CliResult<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::usage(format!("starting runtime: {e}")))
}

fn parse_addr(listen: &str) -> CliResult<SocketAddr> {
    listen
        .parse()
        .map_err(|e| Failure::usage(format!("invalid listen address {listen:?}: {e}")))
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

fn serve(cfg: ServiceConfig, args: ServeArgs) -> CliResult {
    let addr = parse_addr(args.listen.as_deref().unwrap_or(&cfg.listen_address))?;
    let w = world(&cfg, None)?;
    let engine = Arc::new(
        Engine::new(w.index, w.gateway, Arc::new(MemoryImageStore::new()), w.database)
            .map_err(|e| Failure::usage(e.to_string()))?
            .with_clock(cfg.latency_clock())
            .with_seed(cfg.seed),
    );
    let mut state = AppState::new(engine.clone(), cfg.session_defaults.clone());
    if let Some(log) = &cfg.trajectory_log {
        state = state
            .with_trajectory_log(log)
            .map_err(|e| Failure::write(log, e))?;
    }
    let app = router(Arc::new(state), &cfg.cors_origins);
    let rt = runtime()?;
    let shown = engine.clone();
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure::usage(format!("binding {addr}: {e}")))?;
        info!(
            "serving {} images (dim {}) on {addr}",
            shown.index().len(),
            shown.index().dim()
        );
        axum::serve(listener, app)
            .with_graceful_shutdown(shutdown_signal())
            .await
            .map_err(|e| Failure::usage(e.to_string()))
    })?;
    // The engine may own a blocking HTTP client; release it outside the runtime.
    drop(rt);
    drop(engine);
    Ok(())
}

fn mock_init(cfg: &ServiceConfig, n: Option<usize>, out: &Output) -> CliResult {
    let dir = out.required()?;
    out.check(dir)?;
    let world = cfg.mock_world()?;
    let n = n.unwrap_or(cfg.mock.database_size);
    if n == 0 {
        return Err(Failure::usage("--n must be positive"));
    }
    let records = world.database_records(n);
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Failure::write(&images, e))?;
    let csv_path = dir.join("embeddings.csv");
    let f = File::create(&csv_path).map_err(|e| Failure::write(&csv_path, e))?;
    write_embeddings(BufWriter::new(f), &records).map_err(|e| Failure::write(&csv_path, e))?;
    for r in &records {
        let blob = encode_vector_png(&r.embedding, ImageOrigin::Database);
        let p = images.join(format!("{}.png", r.id));
        fs::write(&p, blob.bytes()).map_err(|e| Failure::write(&p, e))?;
    }
    let index = build_index(records, world.config().dim)
        .map_err(|e| Failure::usage(e.to_string()))?;
    let index_path = dir.join("index.genir");
    save_index(&index, &index_path).map_err(|e| Failure::write(&index_path, e))?;
    println!(
        "wrote {n} mock images of dim {} to {}",
        world.config().dim,
        dir.display()
    );
    Ok(())
}

fn mock_serve(cfg: &ServiceConfig, listen: &str) -> CliResult {
    let addr = parse_addr(listen)?;
    let world = cfg.mock_world()?;
    let app = backend_router(Arc::new(world));
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure::usage(format!("binding {addr}: {e}")))?;
        info!("mock model backend on {addr}");
        axum::serve(listener, app)
            .with_graceful_shutdown(shutdown_signal())
            .await
            .map_err(|e| Failure::usage(e.to_string()))
    })
}
