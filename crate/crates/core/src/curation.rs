//! Batch generation of the multi-round trajectory dataset.
//!
//! For every target the agent plays a full fixed-horizon session; each round
//! becomes one JSONL line holding the query, the synthetic image reference,
//! the retrieved ids and the top-1 correctness label. Synthetic images are
//! written as files next to the trajectory file.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::Gateway;
use crate::session::{
    Channel, DatabaseImages, DirImageStore, Engine, LatencyClock, SessionConfig, SessionError,
    SessionStatus, SessionTrace, StageFailure, StageLatencies,
};
use crate::IndexSnapshot;

pub const SCHEMA_VERSION: u32 = 1;
pub const TRAJECTORY_FILE: &str = "trajectories.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: unsupported schema_version {version}")]
    SchemaVersionUnsupported { line: usize, version: u64 },
    #[error("no targets given")]
    EmptyTargets,
    #[error("target {0:?} is not in the index")]
    UnknownTarget(String),
    #[error("target {0:?} listed twice")]
    DuplicateTarget(String),
    #[error("{failed} of {total} targets failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One dataset line: a round of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub schema_version: u32,
    pub session_id: String,
    pub target_id: Option<String>,
    pub mode: String,
    pub round: u32,
    pub query: String,
    pub synthetic_image_ref: Option<String>,
    pub retrieved_ids: Vec<String>,
    pub similarities: Vec<f32>,
    pub rank_of_target: Option<usize>,
    pub label: Option<u8>,
    pub latency_ms: StageLatencies,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rounds: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_channel: Option<Channel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<StageFailure>,
    /// Keys this version does not know, kept verbatim.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl TrajectoryRecord {
    /// Label recomputed from the record alone.
    pub fn top1_matches_target(&self) -> bool {
        match (&self.target_id, self.retrieved_ids.first()) {
            (Some(t), Some(first)) => t == first,
            _ => false,
        }
    }
}

/// Flattens a trace into one record per round.
pub fn records_from_trace(trace: &SessionTrace) -> Vec<TrajectoryRecord> {
    trace
        .rounds
        .iter()
        .map(|r| TrajectoryRecord {
            schema_version: SCHEMA_VERSION,
            session_id: trace.session_id.clone(),
            target_id: trace.target_id.clone(),
            mode: trace.config.mode.kind.as_str().to_string(),
            round: r.round,
            query: r.query.clone(),
            synthetic_image_ref: r.synthetic_image_ref.clone(),
            retrieved_ids: r.retrieved.entries.iter().map(|e| e.id.clone()).collect(),
            similarities: r.retrieved.entries.iter().map(|e| e.similarity).collect(),
            rank_of_target: r.rank_of_target,
            label: r.label,
            latency_ms: r.latency_ms,
            max_rounds: Some(trace.config.max_rounds),
            effective_channel: Some(r.effective_channel),
            error: r.error.clone(),
            extra: Map::new(),
        })
        .collect()
}

pub fn write_trajectories<W: Write>(
    mut w: W,
    records: &[TrajectoryRecord],
) -> Result<(), CurationError> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses JSONL trajectories. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_trajectories<R: BufRead>(r: R) -> Result<Vec<TrajectoryRecord>, CurationError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(&line).map_err(|e| CurationError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        match value.get("schema_version").and_then(Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(CurationError::SchemaVersionUnsupported {
                    line: line_no,
                    version: v,
                })
            }
            None => {
                return Err(CurationError::MalformedLine {
                    line: line_no,
                    message: "missing schema_version".into(),
                })
            }
        }
        let rec: TrajectoryRecord =
            serde_json::from_value(value).map_err(|e| CurationError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        if rec.retrieved_ids.len() != rec.similarities.len() {
            return Err(CurationError::MalformedLine {
                line: line_no,
                message: "retrieved_ids and similarities differ in length".into(),
            });
        }
        if matches!(rec.label, Some(l) if l > 1) {
            return Err(CurationError::MalformedLine {
                line: line_no,
                message: "label must be 0 or 1".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_trajectories(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>, CurationError> {
    parse_trajectories(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurationJob {
    /// Ground-truth target ids.
    pub targets: Vec<String>,
    pub session_config: SessionConfig,
    pub output_dir: PathBuf,
    pub image_subdir: String,
    pub parallelism: usize,
    pub seed: u64,
    pub clock: LatencyClock,
}

impl CurationJob {
    pub fn new(targets: Vec<String>, session_config: SessionConfig, output_dir: PathBuf) -> Self {
        Self {
            targets,
            session_config,
            output_dir,
            image_subdir: "images".into(),
            parallelism: 1,
            seed: 0,
            clock: LatencyClock::WallClock,
        }
    }

    /// Digest of everything that determines the output files.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            targets: &'a [String],
            session_config: &'a SessionConfig,
            image_subdir: &'a str,
            seed: u64,
            clock: &'a LatencyClock,
        }
        let bytes = serde_json::to_vec(&Hashed {
            targets: &self.targets,
            session_config: &self.session_config,
            image_subdir: &self.image_subdir,
            seed: self.seed,
            clock: &self.clock,
        })
        .expect("job serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationManifest {
    pub config_hash: String,
    pub targets_total: usize,
    pub targets_failed: Vec<String>,
    pub records_written: usize,
    pub created_utc: String,
    pub trajectory_file: String,
    pub image_dir: String,
    /// Failure reason per failed target.
    pub failures: BTreeMap<String, StageFailure>,
}

enum TargetOutcome {
    Done(Vec<TrajectoryRecord>),
    Failed(StageFailure, Vec<String>),
}

fn run_target(engine: &Engine, config: SessionConfig, target: &str) -> TargetOutcome {
    match engine.run_simulated_session(config, target) {
        Ok(trace) if trace.status != SessionStatus::Errored => {
            TargetOutcome::Done(records_from_trace(&trace))
        }
        Ok(trace) => {
            let failure = trace.error.clone().unwrap_or(StageFailure {
                stage: crate::session::Stage::Agent,
                message: "session errored".into(),
            });
            let images = trace
                .rounds
                .iter()
                .filter_map(|r| r.synthetic_image_ref.clone())
                .collect();
            TargetOutcome::Failed(failure, images)
        }
        Err(e) => TargetOutcome::Failed(
            StageFailure {
                stage: crate::session::Stage::Agent,
                message: e.to_string(),
            },
            Vec::new(),
        ),
    }
}

/// Runs the job and writes `trajectories.jsonl`, `manifest.json` and the
/// synthetic images under `output_dir`.
///
/// Output order is ascending target id, then round, whatever the
/// parallelism. Failed targets are skipped and listed in the manifest; the
/// job itself fails only when more than half of the targets fail (the
/// manifest is still written).
pub fn curate(
    job: &CurationJob,
    index: Arc<IndexSnapshot>,
    gateway: Gateway,
    database: Arc<dyn DatabaseImages>,
) -> Result<CurationManifest, CurationError> {
    if job.targets.is_empty() {
        return Err(CurationError::EmptyTargets);
    }
    if job.parallelism == 0 {
        return Err(CurationError::InvalidJob("parallelism must be positive".into()));
    }
    let mut seen = HashSet::new();
    for t in &job.targets {
        if !index.contains(t) {
            return Err(CurationError::UnknownTarget(t.clone()));
        }
        if !seen.insert(t.as_str()) {
            return Err(CurationError::DuplicateTarget(t.clone()));
        }
    }
    job.session_config
        .validate(index.len())
        .map_err(CurationError::InvalidJob)?;

    fs::create_dir_all(&job.output_dir)?;
    let store = DirImageStore::new(&job.output_dir, job.image_subdir.clone())?;
    let engine = Engine::new(index, gateway, Arc::new(store), database)?
        .with_clock(job.clock)
        .with_seed(job.seed);

    let mut targets: Vec<&str> = job.targets.iter().map(String::as_str).collect();
    targets.sort_unstable();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(job.parallelism)
        .build()
        .map_err(|e| CurationError::InvalidJob(e.to_string()))?;
    let outcomes: Vec<(&str, TargetOutcome)> = pool.install(|| {
        targets
            .par_iter()
            .map(|t| (*t, run_target(&engine, job.session_config, t)))
            .collect()
    });

    let mut records = Vec::new();
    let mut failures = BTreeMap::new();
    for (target, outcome) in outcomes {
        match outcome {
            TargetOutcome::Done(r) => records.extend(r),
            TargetOutcome::Failed(failure, images) => {
                warn!("target {target}: {} failed: {}", failure.stage, failure.message);
                for reference in images {
                    let _ = fs::remove_file(job.output_dir.join(reference));
                }
                failures.insert(target.to_string(), failure);
            }
        }
    }
    records.sort_by(|a, b| {
        a.target_id
            .cmp(&b.target_id)
            .then(a.round.cmp(&b.round))
    });

    let trajectory_path = job.output_dir.join(TRAJECTORY_FILE);
    write_trajectories(BufWriter::new(File::create(&trajectory_path)?), &records)?;
    let manifest = CurationManifest {
        config_hash: job.config_hash(),
        targets_total: job.targets.len(),
        targets_failed: failures.keys().cloned().collect(),
        records_written: records.len(),
        created_utc: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        trajectory_file: TRAJECTORY_FILE.into(),
        image_dir: job.image_subdir.clone(),
        failures,
    };
    let mut f = BufWriter::new(File::create(job.output_dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    f.flush()?;
    info!(
        "curated {} records for {} targets ({} failed)",
        manifest.records_written,
        manifest.targets_total,
        manifest.targets_failed.len()
    );
    if manifest.targets_failed.len() * 2 > manifest.targets_total {
        return Err(CurationError::TooManyFailures {
            failed: manifest.targets_failed.len(),
            total: manifest.targets_total,
        });
    }
    Ok(manifest)
}
