//! Serves any [`ModelBackend`] over the gateway wire protocol, so that a
//! mock world can stand in for real model servers.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::json;

use genir_core::gateway::wire::{
    EmbedResponse, EmbedTextRequest, GenerateRequest, ImagePayload, InitialQueryRequest,
    QueryResponse, RefineRequest, EMBED_IMAGE_PATH, EMBED_TEXT_PATH, GENERATE_PATH,
    INITIAL_QUERY_PATH, REFINE_PATH,
};
use genir_core::gateway::{GatewayError, ImageOrigin, ModelBackend, RefineMode};

type Backend = Arc<dyn ModelBackend>;

struct WireError(GatewayError);

impl IntoResponse for WireError {
    fn into_response(self) -> Response {
        let status = match self.0 {
            GatewayError::BackendUnavailable { .. }
            | GatewayError::BackendTimeout { .. }
            | GatewayError::MalformedResponse { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

impl From<GatewayError> for WireError {
    fn from(e: GatewayError) -> Self {
        Self(e)
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, GatewayError> + Send + 'static,
) -> Result<T, WireError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        WireError(GatewayError::MalformedResponse {
            role: genir_core::gateway::Role::Generator,
            message: e.to_string(),
        })
    })?
    .map_err(WireError)
}

fn embed_response(v: Vec<f32>) -> Json<EmbedResponse> {
    Json(EmbedResponse {
        dim: v.len(),
        embedding: v,
    })
}

async fn generate(
    State(b): State<Backend>,
    Json(req): Json<GenerateRequest>,
) -> Result<Json<ImagePayload>, WireError> {
    let blob = blocking(move || b.generate_image(&req.prompt, req.seed)).await?;
    Ok(Json(ImagePayload::from_blob(&blob)))
}

async fn embed_image(
    State(b): State<Backend>,
    Json(req): Json<ImagePayload>,
) -> Result<Json<EmbedResponse>, WireError> {
    let blob = req.into_blob(ImageOrigin::Generated)?;
    Ok(embed_response(blocking(move || b.embed_image(&blob)).await?))
}

async fn embed_text(
    State(b): State<Backend>,
    Json(req): Json<EmbedTextRequest>,
) -> Result<Json<EmbedResponse>, WireError> {
    Ok(embed_response(blocking(move || b.embed_text(&req.text)).await?))
}

async fn initial_query(
    State(b): State<Backend>,
    Json(req): Json<InitialQueryRequest>,
) -> Result<Json<QueryResponse>, WireError> {
    let target = req.target.into_blob(ImageOrigin::Database)?;
    let query = blocking(move || b.initial_query(&target)).await?;
    Ok(Json(QueryResponse { query }))
}

async fn refine(
    State(b): State<Backend>,
    Json(req): Json<RefineRequest>,
) -> Result<Json<QueryResponse>, WireError> {
    let mode: RefineMode = req.mode.parse().map_err(GatewayError::InvalidHistory)?;
    let history = req.history()?;
    let target = req.target.into_blob(ImageOrigin::Database)?;
    let feedback = req
        .feedback
        .map(|f| f.into_blob(ImageOrigin::Generated))
        .transpose()?;
    let query = blocking(move || b.refine_query(&target, feedback.as_ref(), &history, mode)).await?;
    Ok(Json(QueryResponse { query }))
}

/// All five wire endpoints on one router.
pub fn backend_router(backend: Backend) -> Router {
    Router::new()
        .route(GENERATE_PATH, post(generate))
        .route(EMBED_IMAGE_PATH, post(embed_image))
        .route(EMBED_TEXT_PATH, post(embed_text))
        .route(INITIAL_QUERY_PATH, post(initial_query))
        .route(REFINE_PATH, post(refine))
        .with_state(backend)
}
