//! Multi-round retrieval sessions.
//!
//! A round takes the searcher's query `q_t` and, depending on the feedback
//! channel, either renders it with the generator and searches image-to-image
//! (visual channel) or embeds the text and searches cross-modally (verbal
//! channel). Round 0 is the initial query; a session with `max_rounds = T`
//! has at most `T + 1` rounds (dialog lengths `0..=T`).

mod images;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{DialogHistory, Gateway, GatewayError, ImageBlob, RefineMode};
use crate::index::IndexError;
use crate::rng::{rng_from, stable_hash64};
use crate::{Embedding, IndexSnapshot, RetrievalResult};

pub use images::{
    DatabaseImages, DirImageStore, EmbeddedImages, FsImages, ImageStore, MemoryImageStore,
};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_MAX_ROUNDS: u32 = 10;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown target {0:?}")]
    UnknownTarget(String),
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("session is finished")]
    SessionFinished,
    #[error("query is empty")]
    EmptyQuery,
    #[error("{stage} stage failed: {message}")]
    Stage {
        stage: Stage,
        message: String,
        #[source]
        source: Option<GatewayError>,
    },
    #[error("channel choice requires hybrid_random mode")]
    WrongMode,
    #[error(transparent)]
    Index(#[from] IndexError),
}

impl SessionError {
    fn stage(stage: Stage, err: GatewayError) -> Self {
        SessionError::Stage {
            stage,
            message: err.to_string(),
            source: Some(err),
        }
    }

    fn stage_msg(stage: Stage, message: impl Into<String>) -> Self {
        SessionError::Stage {
            stage,
            message: message.into(),
            source: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Embed,
    Retrieve,
    Agent,
    Store,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Generate => "generate",
            Stage::Embed => "embed",
            Stage::Retrieve => "retrieve",
            Stage::Agent => "agent",
            Stage::Store => "store",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Generative,
    Verbal,
    Prediction,
    HybridRandom,
}

impl ModeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeKind::Generative => "generative",
            ModeKind::Verbal => "verbal",
            ModeKind::Prediction => "prediction",
            ModeKind::HybridRandom => "hybrid_random",
        }
    }
}

impl fmt::Display for ModeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "generative" => Ok(ModeKind::Generative),
            "verbal" => Ok(ModeKind::Verbal),
            "prediction" => Ok(ModeKind::Prediction),
            "hybrid_random" => Ok(ModeKind::HybridRandom),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

/// Feedback policy of a session. `visual_fraction` is set exactly for
/// `HybridRandom`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackMode {
    pub kind: ModeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_fraction: Option<f64>,
}

impl FeedbackMode {
    pub const GENERATIVE: Self = Self::simple(ModeKind::Generative);
    pub const VERBAL: Self = Self::simple(ModeKind::Verbal);
    pub const PREDICTION: Self = Self::simple(ModeKind::Prediction);

    const fn simple(kind: ModeKind) -> Self {
        Self {
            kind,
            visual_fraction: None,
        }
    }

    pub fn hybrid_random(visual_fraction: f64) -> Self {
        Self {
            kind: ModeKind::HybridRandom,
            visual_fraction: Some(visual_fraction),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match (self.kind, self.visual_fraction) {
            (ModeKind::HybridRandom, Some(p)) if (0.0..=1.0).contains(&p) => Ok(()),
            (ModeKind::HybridRandom, Some(p)) => {
                Err(format!("visual_fraction {p} outside [0, 1]"))
            }
            (ModeKind::HybridRandom, None) => {
                Err("hybrid_random requires visual_fraction".into())
            }
            (_, Some(_)) => Err("visual_fraction is only valid for hybrid_random".into()),
            (_, None) => Ok(()),
        }
    }
}

/// What the searcher sees between rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Visual,
    Verbal,
}

/// Per-session channel draw for `hybrid_random`: visual with probability
/// `visual_fraction`, deterministic in `session_seed`.
pub fn choose_channel(mode: &FeedbackMode, session_seed: u64) -> Result<Channel, SessionError> {
    if mode.kind != ModeKind::HybridRandom {
        return Err(SessionError::WrongMode);
    }
    mode.validate().map_err(SessionError::InvalidConfig)?;
    let p = mode.visual_fraction.unwrap_or(0.0);
    let u: f64 = rng_from(session_seed).random();
    Ok(if u < p { Channel::Visual } else { Channel::Verbal })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessRule {
    /// Target is the top-1 result.
    Rank1,
    /// Target is within the top `k`.
    Topk,
    /// The searcher declares success.
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub mode: FeedbackMode,
    pub k: usize,
    pub max_rounds: u32,
    pub success_rule: SuccessRule,
    /// Stop at the first successful round (interactive semantics) instead of
    /// running all rounds (curation semantics).
    pub stop_on_success: bool,
}

impl SessionConfig {
    /// Fixed-horizon runs labelled by top-1 equality.
    pub fn curation(mode: FeedbackMode) -> Self {
        Self {
            mode,
            k: DEFAULT_K,
            max_rounds: DEFAULT_MAX_ROUNDS,
            success_rule: SuccessRule::Rank1,
            stop_on_success: false,
        }
    }

    /// Stops once the target reaches the top `k`.
    pub fn interactive(mode: FeedbackMode) -> Self {
        Self {
            success_rule: SuccessRule::Topk,
            stop_on_success: true,
            ..Self::curation(mode)
        }
    }

    /// Human-driven sessions: success is declared by the searcher.
    pub fn live(mode: FeedbackMode) -> Self {
        Self {
            success_rule: SuccessRule::Manual,
            stop_on_success: true,
            ..Self::curation(mode)
        }
    }

    pub fn validate(&self, index_size: usize) -> Result<(), String> {
        self.mode.validate()?;
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        if self.k > index_size {
            return Err(format!("k {} exceeds index size {index_size}", self.k));
        }
        if self.max_rounds == 0 {
            return Err("max_rounds must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLatencies {
    pub generate: Option<u64>,
    pub embed: Option<u64>,
    pub retrieve: Option<u64>,
    pub agent: Option<u64>,
}

impl StageLatencies {
    pub fn get(&self, stage: Stage) -> Option<u64> {
        match stage {
            Stage::Generate => self.generate,
            Stage::Embed => self.embed,
            Stage::Retrieve => self.retrieve,
            Stage::Agent => self.agent,
            Stage::Store => None,
        }
    }

    fn set(&mut self, stage: Stage, ms: u64) {
        match stage {
            Stage::Generate => self.generate = Some(ms),
            Stage::Embed => self.embed = Some(ms),
            Stage::Retrieve => self.retrieve = Some(ms),
            Stage::Agent => self.agent = Some(ms),
            Stage::Store => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

/// One round: the query, the synthetic image (visual channel), what was
/// retrieved, and whether it hit the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub query: String,
    pub synthetic_image_ref: Option<String>,
    pub retrieved: RetrievalResult,
    pub rank_of_target: Option<usize>,
    /// 1 when the top-1 result is the target.
    pub label: Option<u8>,
    pub latency_ms: StageLatencies,
    pub effective_channel: Channel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<StageFailure>,
}

impl RoundRecord {
    pub fn is_errored(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    Succeeded,
    Exhausted,
    Errored,
    Abandoned,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        self != SessionStatus::Running
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub session_id: String,
    pub target_id: Option<String>,
    pub config: SessionConfig,
    pub channel: Channel,
    pub rounds: Vec<RoundRecord>,
    pub status: SessionStatus,
    /// Failure outside a round (agent query formulation).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<StageFailure>,
}

/// Live session state: the trace plus what the next round needs.
#[derive(Debug, Clone)]
pub struct Session {
    trace: SessionTrace,
    history: DialogHistory,
    query_embeddings: Vec<Option<Embedding>>,
    feedback: Option<ImageBlob>,
}

impl Session {
    pub fn trace(&self) -> &SessionTrace {
        &self.trace
    }

    pub fn into_trace(self) -> SessionTrace {
        self.trace
    }

    pub fn id(&self) -> &str {
        &self.trace.session_id
    }

    pub fn history(&self) -> &DialogHistory {
        &self.history
    }

    /// Feedback image for the next refinement: the synthetic image (visual
    /// channel) or the top-1 database image (prediction mode).
    pub fn feedback(&self) -> Option<&ImageBlob> {
        self.feedback.as_ref()
    }

    fn next_round(&self) -> u32 {
        self.trace.rounds.len() as u32
    }

    fn refine_mode(&self) -> RefineMode {
        match (self.trace.config.mode.kind, self.trace.channel) {
            (ModeKind::Prediction, _) => RefineMode::Prediction,
            (_, Channel::Visual) => RefineMode::Generative,
            (_, Channel::Verbal) => RefineMode::Verbal,
        }
    }
}

/// Nominal per-stage costs used instead of wall-clock time, so that runs are
/// replayable byte for byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NominalLatencies {
    pub generate_ms: u64,
    pub embed_ms: u64,
    pub retrieve_ms: u64,
    pub agent_ms: u64,
}

impl Default for NominalLatencies {
    /// Orders of magnitude of a diffusion generator (16 s), an encoder, an
    /// exact search and a VLM agent turn (2 s).
    fn default() -> Self {
        Self {
            generate_ms: 16_000,
            embed_ms: 50,
            retrieve_ms: 20,
            agent_ms: 2_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyClock {
    WallClock,
    Nominal(NominalLatencies),
}

impl LatencyClock {
    fn time<T>(&self, stage: Stage, f: impl FnOnce() -> T) -> (T, u64) {
        match self {
            LatencyClock::WallClock => {
                let start = Instant::now();
                let out = f();
                (out, start.elapsed().as_millis() as u64)
            }
            LatencyClock::Nominal(n) => {
                let ms = match stage {
                    Stage::Generate => n.generate_ms,
                    Stage::Embed => n.embed_ms,
                    Stage::Retrieve => n.retrieve_ms,
                    Stage::Agent => n.agent_ms,
                    Stage::Store => 0,
                };
                (f(), ms)
            }
        }
    }
}

/// Runs sessions against one index and one gateway. Shareable across
/// threads; each [`Session`] is driven by one caller at a time.
pub struct Engine {
    index: Arc<IndexSnapshot>,
    gateway: Gateway,
    store: Arc<dyn ImageStore>,
    database: Arc<dyn DatabaseImages>,
    clock: LatencyClock,
    seed: u64,
    created: AtomicU64,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("index_size", &self.index.len())
            .field("dim", &self.index.dim())
            .field("seed", &self.seed)
            .finish()
    }
}

impl Engine {
    pub fn new(
        index: Arc<IndexSnapshot>,
        gateway: Gateway,
        store: Arc<dyn ImageStore>,
        database: Arc<dyn DatabaseImages>,
    ) -> Result<Self, SessionError> {
        if gateway.dim() != index.dim() {
            return Err(SessionError::InvalidConfig(format!(
                "gateway dim {} does not match index dim {}",
                gateway.dim(),
                index.dim()
            )));
        }
        Ok(Self {
            index,
            gateway,
            store,
            database,
            clock: LatencyClock::WallClock,
            seed: 0,
            created: AtomicU64::new(0),
        })
    }

    pub fn with_clock(mut self, clock: LatencyClock) -> Self {
        self.clock = clock;
        self
    }

    /// Seeds session ids and hybrid channel draws.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn index(&self) -> &IndexSnapshot {
        &self.index
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn store(&self) -> &dyn ImageStore {
        self.store.as_ref()
    }

    pub fn database_image(&self, id: &str) -> Result<ImageBlob, String> {
        self.database.load(&self.index, id)
    }

    /// Generation seed of a round: reproducible without coordination.
    pub fn generation_seed(session_id: &str, round: u32) -> u64 {
        stable_hash64(&[b"generate", session_id.as_bytes(), &round.to_le_bytes()])
    }

    fn session_seed(&self, session_id: &str) -> u64 {
        stable_hash64(&[b"channel", &self.seed.to_le_bytes(), session_id.as_bytes()])
    }

    /// Fresh session with an engine-unique id.
    pub fn create_session(
        &self,
        config: SessionConfig,
        target_id: Option<&str>,
    ) -> Result<Session, SessionError> {
        let n = self.created.fetch_add(1, Ordering::Relaxed);
        let id = format!(
            "s-{:016x}",
            stable_hash64(&[b"session", &self.seed.to_le_bytes(), &n.to_le_bytes()])
        );
        self.create_session_with_id(id, config, target_id)
    }

    pub fn create_session_with_id(
        &self,
        session_id: String,
        config: SessionConfig,
        target_id: Option<&str>,
    ) -> Result<Session, SessionError> {
        config
            .validate(self.index.len())
            .map_err(SessionError::InvalidConfig)?;
        if let Some(t) = target_id {
            if !self.index.contains(t) {
                return Err(SessionError::UnknownTarget(t.to_string()));
            }
        }
        let channel = match config.mode.kind {
            ModeKind::Generative => Channel::Visual,
            ModeKind::Verbal | ModeKind::Prediction => Channel::Verbal,
            ModeKind::HybridRandom => choose_channel(&config.mode, self.session_seed(&session_id))?,
        };
        Ok(Session {
            trace: SessionTrace {
                session_id,
                target_id: target_id.map(String::from),
                config,
                channel,
                rounds: Vec::new(),
                status: SessionStatus::Running,
                error: None,
            },
            history: DialogHistory::new(),
            query_embeddings: Vec::new(),
            feedback: None,
        })
    }

    /// Executes one round for `query`. On a stage failure an errored round
    /// is appended and the error returned; the session stays usable.
    pub fn run_round<'s>(
        &self,
        session: &'s mut Session,
        query: &str,
    ) -> Result<&'s RoundRecord, SessionError> {
        self.run_round_timed(session, query, None)
    }

    fn run_round_timed<'s>(
        &self,
        session: &'s mut Session,
        query: &str,
        agent_ms: Option<u64>,
    ) -> Result<&'s RoundRecord, SessionError> {
        let t = session.next_round();
        let config = session.trace.config;
        if session.trace.status.is_terminal() || t > config.max_rounds {
            return Err(SessionError::SessionFinished);
        }
        if query.trim().is_empty() {
            return Err(SessionError::EmptyQuery);
        }
        let mut latency = StageLatencies {
            agent: agent_ms,
            ..Default::default()
        };
        let outcome = self.execute(session, t, query, &mut latency);
        session.history.push_query(query);
        match outcome {
            Ok(done) => {
                let rank = match session.trace.target_id.as_deref() {
                    Some(target) => Some(self.index.rank_of(&done.embedding, target)?),
                    None => None,
                };
                session.feedback = done.feedback;
                session.query_embeddings.push(Some(done.embedding));
                session.trace.rounds.push(RoundRecord {
                    round: t,
                    query: query.to_string(),
                    synthetic_image_ref: done.synthetic_ref,
                    retrieved: done.retrieved,
                    rank_of_target: rank,
                    label: rank.map(|r| u8::from(r == 1)),
                    latency_ms: latency,
                    effective_channel: session.trace.channel,
                    error: None,
                });
                let success = match (config.success_rule, rank) {
                    (SuccessRule::Rank1, Some(r)) => r == 1,
                    (SuccessRule::Topk, Some(r)) => r <= config.k,
                    _ => false,
                };
                if success && config.stop_on_success {
                    session.trace.status = SessionStatus::Succeeded;
                } else if t == config.max_rounds && config.success_rule != SuccessRule::Manual {
                    session.trace.status = if success {
                        SessionStatus::Succeeded
                    } else {
                        SessionStatus::Exhausted
                    };
                }
                Ok(session.trace.rounds.last().expect("just pushed"))
            }
            Err(err) => {
                let (stage, message) = match &err {
                    SessionError::Stage { stage, message, .. } => (*stage, message.clone()),
                    other => (Stage::Retrieve, other.to_string()),
                };
                session.feedback = None;
                session.query_embeddings.push(None);
                session.trace.rounds.push(RoundRecord {
                    round: t,
                    query: query.to_string(),
                    synthetic_image_ref: None,
                    retrieved: RetrievalResult {
                        entries: Vec::new(),
                        k_requested: config.k,
                    },
                    rank_of_target: None,
                    label: None,
                    latency_ms: latency,
                    effective_channel: session.trace.channel,
                    error: Some(StageFailure { stage, message }),
                });
                if t == config.max_rounds && config.success_rule != SuccessRule::Manual {
                    session.trace.status = SessionStatus::Exhausted;
                }
                Err(err)
            }
        }
    }

    fn execute(
        &self,
        session: &Session,
        t: u32,
        query: &str,
        latency: &mut StageLatencies,
    ) -> Result<RoundOutput, SessionError> {
        let (embedding, synthetic_ref, synthetic) = match session.trace.channel {
            Channel::Visual => {
                let seed = Self::generation_seed(&session.trace.session_id, t);
                let (blob, ms) = self
                    .clock
                    .time(Stage::Generate, || self.gateway.generate_image(query, seed));
                latency.set(Stage::Generate, ms);
                let blob = blob.map_err(|e| SessionError::stage(Stage::Generate, e))?;
                let name = format!("{}_{t}", session.trace.session_id);
                let reference = self
                    .store
                    .put(&name, &blob)
                    .map_err(|e| SessionError::stage_msg(Stage::Store, e.to_string()))?;
                let (emb, ms) = self
                    .clock
                    .time(Stage::Embed, || self.gateway.embed_image(&blob));
                latency.set(Stage::Embed, ms);
                let emb = emb.map_err(|e| SessionError::stage(Stage::Embed, e))?;
                (emb, Some(reference), Some(blob))
            }
            Channel::Verbal => {
                let (emb, ms) = self
                    .clock
                    .time(Stage::Embed, || self.gateway.embed_text(query));
                latency.set(Stage::Embed, ms);
                let emb = emb.map_err(|e| SessionError::stage(Stage::Embed, e))?;
                (emb, None, None)
            }
        };
        let k = session.trace.config.k;
        let (retrieved, ms) = self
            .clock
            .time(Stage::Retrieve, || self.index.top_k(&embedding, k));
        latency.set(Stage::Retrieve, ms);
        let retrieved = retrieved.map_err(|e| SessionError::stage_msg(Stage::Retrieve, e.to_string()))?;
        let feedback = match session.refine_mode() {
            RefineMode::Generative => synthetic,
            RefineMode::Verbal => None,
            RefineMode::Prediction => {
                let top1 = retrieved.top1().expect("index is non-empty");
                Some(
                    self.database_image(top1)
                        .map_err(|e| SessionError::stage_msg(Stage::Retrieve, e))?,
                )
            }
        };
        Ok(RoundOutput {
            embedding,
            synthetic_ref,
            retrieved,
            feedback,
        })
    }

    /// Ends a session: `succeeded` when the searcher names the image they
    /// found, `abandoned` otherwise. If the session had no target, the found
    /// image becomes the target and per-round ranks are filled in.
    pub fn complete(&self, session: &mut Session, found_id: Option<&str>) -> Result<(), SessionError> {
        if session.trace.status.is_terminal() {
            return Err(SessionError::SessionFinished);
        }
        match found_id {
            Some(found) => {
                if !self.index.contains(found) {
                    return Err(SessionError::UnknownTarget(found.to_string()));
                }
                if session.trace.target_id.is_none() {
                    session.trace.target_id = Some(found.to_string());
                    for (rec, emb) in session.trace.rounds.iter_mut().zip(&session.query_embeddings) {
                        if let Some(emb) = emb {
                            let rank = self.index.rank_of(emb, found)?;
                            rec.rank_of_target = Some(rank);
                            rec.label = Some(u8::from(rank == 1));
                        }
                    }
                }
                session.trace.status = SessionStatus::Succeeded;
            }
            None => session.trace.status = SessionStatus::Abandoned,
        }
        Ok(())
    }

    fn simulated_session_id(&self, config: &SessionConfig, target_id: &str) -> String {
        let h = stable_hash64(&[
            b"simulated",
            &self.seed.to_le_bytes(),
            config.mode.kind.as_str().as_bytes(),
            &config.mode.visual_fraction.unwrap_or(-1.0).to_le_bytes(),
            target_id.as_bytes(),
        ]);
        format!("sim-{h:016x}")
    }

    /// Runs a whole session with the agent playing the searcher.
    ///
    /// Precondition violations are returned as errors; stage failures end
    /// the session with status `errored` and the rounds completed so far.
    pub fn run_simulated_session(
        &self,
        config: SessionConfig,
        target_id: &str,
    ) -> Result<SessionTrace, SessionError> {
        let id = self.simulated_session_id(&config, target_id);
        let mut session = self.create_session_with_id(id, config, Some(target_id))?;
        let target = self
            .database_image(target_id)
            .map_err(|e| SessionError::InvalidConfig(format!("target image: {e}")))?;
        let fail = |mut session: Session, stage: Stage, message: String| {
            session.trace.status = SessionStatus::Errored;
            session.trace.error = Some(StageFailure { stage, message });
            session.trace
        };
        let (q0, agent_ms) = self
            .clock
            .time(Stage::Agent, || self.gateway.initial_query(&target));
        let mut query = match q0 {
            Ok(q) => q,
            Err(e) => return Ok(fail(session, Stage::Agent, e.to_string())),
        };
        let mut agent_ms = Some(agent_ms);
        loop {
            if let Err(e) = self.run_round_timed(&mut session, &query, agent_ms) {
                let failure = session
                    .trace
                    .rounds
                    .last()
                    .and_then(|r| r.error.clone())
                    .unwrap_or(StageFailure {
                        stage: Stage::Retrieve,
                        message: e.to_string(),
                    });
                session.trace.status = SessionStatus::Errored;
                session.trace.error = Some(failure);
                return Ok(session.trace);
            }
            if session.trace.status.is_terminal() {
                return Ok(session.trace);
            }
            if session.next_round() > config.max_rounds {
                // manual rule: nobody declares success in a simulation
                session.trace.status = SessionStatus::Exhausted;
                return Ok(session.trace);
            }
            let mode = session.refine_mode();
            let (next, ms) = self.clock.time(Stage::Agent, || {
                self.gateway
                    .refine_query(&target, session.feedback(), session.history(), mode)
            });
            match next {
                Ok(q) => query = q,
                Err(e) => return Ok(fail(session, Stage::Agent, e.to_string())),
            }
            agent_ms = Some(ms);
        }
    }
}

struct RoundOutput {
    embedding: Embedding,
    synthetic_ref: Option<String>,
    retrieved: RetrievalResult,
    feedback: Option<ImageBlob>,
}

/// Retrieved ids of a round, best first.
pub fn retrieved_ids(record: &RoundRecord) -> Vec<&str> {
    record.retrieved.ids().collect()
}

#[cfg(test)]
mod tests;
