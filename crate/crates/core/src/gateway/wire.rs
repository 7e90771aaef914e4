//! JSON bodies of the inference wire protocol.
//!
//! | route                         | request              | response          |
//! |-------------------------------|----------------------|-------------------|
//! | `POST /v1/generate`           | [`GenerateRequest`]  | [`ImagePayload`]  |
//! | `POST /v1/embed/image`        | [`ImagePayload`]     | [`EmbedResponse`] |
//! | `POST /v1/embed/text`         | [`EmbedTextRequest`] | [`EmbedResponse`] |
//! | `POST /v1/agent/initial_query`| [`InitialQueryRequest`] | [`QueryResponse`] |
//! | `POST /v1/agent/refine`       | [`RefineRequest`]    | [`QueryResponse`] |

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{DialogHistory, GatewayError, ImageBlob, ImageFormat, ImageOrigin, Turn};

pub const GENERATE_PATH: &str = "/v1/generate";
pub const EMBED_IMAGE_PATH: &str = "/v1/embed/image";
pub const EMBED_TEXT_PATH: &str = "/v1/embed/text";
pub const INITIAL_QUERY_PATH: &str = "/v1/agent/initial_query";
pub const REFINE_PATH: &str = "/v1/agent/refine";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub format: ImageFormat,
    pub data_b64: String,
}

impl ImagePayload {
    pub fn from_blob(blob: &ImageBlob) -> Self {
        Self {
            format: blob.format(),
            data_b64: STANDARD.encode(blob.bytes()),
        }
    }

    pub fn into_blob(self, origin: ImageOrigin) -> Result<ImageBlob, GatewayError> {
        let bytes = STANDARD
            .decode(self.data_b64.as_bytes())
            .map_err(|e| GatewayError::InvalidImage(format!("base64: {e}")))?;
        ImageBlob::new(self.format, bytes, origin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub dim: usize,
    pub embedding: Vec<f32>,
}

impl EmbedResponse {
    /// Consistency of the declared width with the payload.
    pub fn checked(self) -> Result<Vec<f32>, String> {
        if self.dim != self.embedding.len() {
            return Err(format!(
                "declared dim {} but {} values",
                self.dim,
                self.embedding.len()
            ));
        }
        Ok(self.embedding)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialQueryRequest {
    pub target: ImagePayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTurn {
    pub round: u32,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRequest {
    pub target: ImagePayload,
    pub feedback: Option<ImagePayload>,
    pub mode: String,
    pub history: Vec<WireTurn>,
}

impl RefineRequest {
    pub fn history(&self) -> Result<DialogHistory, GatewayError> {
        DialogHistory::from_turns(
            self.history
                .iter()
                .map(|t| Turn {
                    round: t.round,
                    query: t.query.clone(),
                    feedback_summary: None,
                })
                .collect(),
        )
    }
}

pub fn wire_history(history: &DialogHistory) -> Vec<WireTurn> {
    history
        .turns()
        .iter()
        .map(|t| WireTurn {
            round: t.round,
            query: t.query.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub query: String,
}
