//! Access to the three inference roles: image generator, embedder and the
//! user agent.
//!
//! [`ModelBackend`] is the raw contract implemented by the HTTP client and by
//! the deterministic [`MockWorld`]. [`Gateway`] wraps a backend and enforces
//! the request limits and the reply checks (dimension, finiteness, unit norm)
//! so that nothing malformed reaches session state.

mod http;
mod mock;
pub mod payload;
pub mod wire;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{normalize, EmbeddingError};
use crate::Embedding;

pub use http::{BackendEndpoint, HttpBackend, HttpBackendConfig};
pub use mock::{MockWorld, MockWorldConfig, MOCK_QUERY_PREFIX};

/// Upper bound on prompt and query text, in bytes.
pub const MAX_TEXT_BYTES: usize = 8 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    ImageEmbedder,
    TextEmbedder,
    Agent,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Generator => "generator",
            Role::ImageEmbedder => "image_embedder",
            Role::TextEmbedder => "text_embedder",
            Role::Agent => "agent",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("{role} backend unavailable: {message}")]
    BackendUnavailable { role: Role, message: String },
    #[error("{role} backend timed out")]
    BackendTimeout { role: Role },
    #[error("malformed {role} response: {message}")]
    MalformedResponse { role: Role, message: String },
    #[error("text is {0} bytes; limit is {MAX_TEXT_BYTES}")]
    PromptTooLong(usize),
    #[error("text is empty")]
    EmptyPrompt,
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("{0} feedback requires an image")]
    MissingFeedback(RefineMode),
    #[error("verbal refinement takes no feedback image")]
    UnexpectedFeedback,
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid dialog history: {0}")]
    InvalidHistory(String),
}

impl GatewayError {
    /// Whether a retry of the same request may succeed.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            GatewayError::BackendUnavailable { .. } | GatewayError::BackendTimeout { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Png,
    Jpeg,
}

impl ImageFormat {
    const PNG_SIGNATURE: &'static [u8] = &[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];
    const JPEG_SIGNATURE: &'static [u8] = &[0xFF, 0xD8, 0xFF];

    /// Sniffs the format from the payload header.
    pub fn detect(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(Self::PNG_SIGNATURE) {
            Some(ImageFormat::Png)
        } else if bytes.starts_with(Self::JPEG_SIGNATURE) {
            Some(ImageFormat::Jpeg)
        } else {
            None
        }
    }

    pub fn content_type(self) -> &'static str {
        match self {
            ImageFormat::Png => "image/png",
            ImageFormat::Jpeg => "image/jpeg",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Jpeg => "jpg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageOrigin {
    Generated,
    Database,
}

/// An encoded image together with where it came from.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBlob {
    format: ImageFormat,
    bytes: Vec<u8>,
    origin: ImageOrigin,
}

impl fmt::Debug for ImageBlob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageBlob")
            .field("format", &self.format)
            .field("len", &self.bytes.len())
            .field("origin", &self.origin)
            .finish()
    }
}

impl ImageBlob {
    /// Checks that the payload is non-empty and that its header matches
    /// `format`.
    pub fn new(
        format: ImageFormat,
        bytes: Vec<u8>,
        origin: ImageOrigin,
    ) -> Result<Self, GatewayError> {
        if bytes.is_empty() {
            return Err(GatewayError::InvalidImage("empty payload".into()));
        }
        match ImageFormat::detect(&bytes) {
            Some(f) if f == format => Ok(Self {
                format,
                bytes,
                origin,
            }),
            Some(f) => Err(GatewayError::InvalidImage(format!(
                "tagged {format:?} but payload is {f:?}"
            ))),
            None => Err(GatewayError::InvalidImage(
                "payload is neither PNG nor JPEG".into(),
            )),
        }
    }

    /// Builds a blob whose format is sniffed from the payload.
    pub fn sniff(bytes: Vec<u8>, origin: ImageOrigin) -> Result<Self, GatewayError> {
        let format = ImageFormat::detect(&bytes)
            .ok_or_else(|| GatewayError::InvalidImage("unrecognized image payload".into()))?;
        Self::new(format, bytes, origin)
    }

    pub fn format(&self) -> ImageFormat {
        self.format
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn origin(&self) -> ImageOrigin {
        self.origin
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// Which feedback the agent refines from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineMode {
    /// Synthetic image of the current query.
    Generative,
    /// Dialog history only.
    Verbal,
    /// Top-1 retrieved database image.
    Prediction,
}

impl RefineMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RefineMode::Generative => "generative",
            RefineMode::Verbal => "verbal",
            RefineMode::Prediction => "prediction",
        }
    }

    pub fn needs_image(self) -> bool {
        !matches!(self, RefineMode::Verbal)
    }
}

impl fmt::Display for RefineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RefineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "generative" => Ok(RefineMode::Generative),
            "verbal" => Ok(RefineMode::Verbal),
            "prediction" => Ok(RefineMode::Prediction),
            other => Err(format!("unknown refine mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub round: u32,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_summary: Option<String>,
}

/// Queries issued so far, rounds numbered contiguously from 0.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogHistory {
    turns: Vec<Turn>,
}

impl DialogHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_turns(turns: Vec<Turn>) -> Result<Self, GatewayError> {
        let mut h = Self::new();
        for t in turns {
            h.push(t)?;
        }
        Ok(h)
    }

    pub fn push(&mut self, turn: Turn) -> Result<(), GatewayError> {
        let expected = self.turns.len() as u32;
        if turn.round != expected {
            return Err(GatewayError::InvalidHistory(format!(
                "expected round {expected}, got {}",
                turn.round
            )));
        }
        self.turns.push(turn);
        Ok(())
    }

    /// Appends `query` as the next round.
    pub fn push_query(&mut self, query: impl Into<String>) {
        let round = self.turns.len() as u32;
        self.turns.push(Turn {
            round,
            query: query.into(),
            feedback_summary: None,
        });
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn last(&self) -> Option<&Turn> {
        self.turns.last()
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

/// Raw inference contract. Implementations return unvalidated replies;
/// [`Gateway`] checks them.
pub trait ModelBackend: Send + Sync {
    fn generate_image(&self, prompt: &str, seed: u64) -> Result<ImageBlob, GatewayError>;
    fn embed_image(&self, blob: &ImageBlob) -> Result<Vec<f32>, GatewayError>;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, GatewayError>;
    fn initial_query(&self, target: &ImageBlob) -> Result<String, GatewayError>;
    fn refine_query(
        &self,
        target: &ImageBlob,
        feedback: Option<&ImageBlob>,
        history: &DialogHistory,
        mode: RefineMode,
    ) -> Result<String, GatewayError>;
}

fn check_text(text: &str) -> Result<(), GatewayError> {
    if text.trim().is_empty() {
        return Err(GatewayError::EmptyPrompt);
    }
    if text.len() > MAX_TEXT_BYTES {
        return Err(GatewayError::PromptTooLong(text.len()));
    }
    Ok(())
}

/// Validating front for a [`ModelBackend`]. Cheap to clone and safe to share
/// between threads.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ModelBackend>,
    dim: usize,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway").field("dim", &self.dim).finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ModelBackend>, dim: usize) -> Self {
        Self { backend, dim }
    }

    pub fn mock(world: MockWorld) -> Self {
        let dim = world.config().dim;
        Self::new(Arc::new(world), dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn generate_image(&self, prompt: &str, seed: u64) -> Result<ImageBlob, GatewayError> {
        check_text(prompt)?;
        let blob = self.backend.generate_image(prompt, seed)?;
        Ok(ImageBlob {
            origin: ImageOrigin::Generated,
            ..blob
        })
    }

    fn to_embedding(&self, role: Role, raw: Vec<f32>) -> Result<Embedding, GatewayError> {
        normalize(&raw, self.dim).map_err(|e| match e {
            EmbeddingError::DimensionMismatch { expected, actual } => {
                GatewayError::DimensionMismatch { expected, actual }
            }
            other => GatewayError::MalformedResponse {
                role,
                message: other.to_string(),
            },
        })
    }

    pub fn embed_image(&self, blob: &ImageBlob) -> Result<Embedding, GatewayError> {
        let raw = self.backend.embed_image(blob)?;
        self.to_embedding(Role::ImageEmbedder, raw)
    }

    pub fn embed_text(&self, text: &str) -> Result<Embedding, GatewayError> {
        check_text(text)?;
        let raw = self.backend.embed_text(text)?;
        self.to_embedding(Role::TextEmbedder, raw)
    }

    fn check_query_reply(query: String) -> Result<String, GatewayError> {
        match check_text(&query) {
            Ok(()) => Ok(query),
            Err(e) => Err(GatewayError::MalformedResponse {
                role: Role::Agent,
                message: format!("agent query rejected: {e}"),
            }),
        }
    }

    pub fn initial_query(&self, target: &ImageBlob) -> Result<String, GatewayError> {
        Self::check_query_reply(self.backend.initial_query(target)?)
    }

    pub fn refine_query(
        &self,
        target: &ImageBlob,
        feedback: Option<&ImageBlob>,
        history: &DialogHistory,
        mode: RefineMode,
    ) -> Result<String, GatewayError> {
        if history.is_empty() {
            return Err(GatewayError::InvalidHistory("history is empty".into()));
        }
        match (mode.needs_image(), feedback.is_some()) {
            (true, false) => return Err(GatewayError::MissingFeedback(mode)),
            (false, true) => return Err(GatewayError::UnexpectedFeedback),
            _ => {}
        }
        Self::check_query_reply(self.backend.refine_query(target, feedback, history, mode)?)
    }
}
