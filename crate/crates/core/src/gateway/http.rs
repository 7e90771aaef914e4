//! Blocking HTTP client for the inference wire protocol.

use std::time::Duration;

use log::warn;
use reqwest::blocking::Client;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::wire::{
    self, EmbedResponse, EmbedTextRequest, GenerateRequest, ImagePayload, InitialQueryRequest,
    QueryResponse, RefineRequest,
};
use super::{DialogHistory, GatewayError, ImageBlob, ImageOrigin, ModelBackend, RefineMode, Role};

pub const MAX_RETRIES_LIMIT: u32 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub role: Role,
    pub base_url: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
}

impl BackendEndpoint {
    /// Endpoint with the role's default timeout: 120 s for generation,
    /// 10 s otherwise.
    pub fn new(role: Role, base_url: impl Into<String>) -> Self {
        let timeout_ms = match role {
            Role::Generator => 120_000,
            _ => 10_000,
        };
        Self {
            role,
            base_url: base_url.into(),
            timeout_ms,
            max_retries: 2,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.timeout_ms == 0 {
            return Err(format!("{} timeout must be positive", self.role));
        }
        if self.max_retries > MAX_RETRIES_LIMIT {
            return Err(format!(
                "{} max_retries {} exceeds {MAX_RETRIES_LIMIT}",
                self.role, self.max_retries
            ));
        }
        if self.base_url.trim().is_empty() {
            return Err(format!("{} base_url is empty", self.role));
        }
        Ok(())
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub generator: BackendEndpoint,
    pub image_embedder: BackendEndpoint,
    pub text_embedder: BackendEndpoint,
    pub agent: BackendEndpoint,
}

impl HttpBackendConfig {
    /// All four roles behind the given servers.
    pub fn new(generator_url: &str, embedder_url: &str, agent_url: &str) -> Self {
        Self {
            generator: BackendEndpoint::new(Role::Generator, generator_url),
            image_embedder: BackendEndpoint::new(Role::ImageEmbedder, embedder_url),
            text_embedder: BackendEndpoint::new(Role::TextEmbedder, embedder_url),
            agent: BackendEndpoint::new(Role::Agent, agent_url),
        }
    }

    pub fn endpoints(&self) -> [&BackendEndpoint; 4] {
        [
            &self.generator,
            &self.image_embedder,
            &self.text_embedder,
            &self.agent,
        ]
    }
}

struct Endpoint {
    endpoint: BackendEndpoint,
    client: Client,
}

impl Endpoint {
    fn new(endpoint: BackendEndpoint) -> Result<Self, GatewayError> {
        endpoint.validate().map_err(|message| GatewayError::BackendUnavailable {
            role: endpoint.role,
            message,
        })?;
        let client = Client::builder()
            .timeout(Duration::from_millis(endpoint.timeout_ms))
            .build()
            .map_err(|e| GatewayError::BackendUnavailable {
                role: endpoint.role,
                message: e.to_string(),
            })?;
        Ok(Self { endpoint, client })
    }

    fn attempt<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, GatewayError> {
        let role = self.endpoint.role;
        let resp = self
            .client
            .post(self.endpoint.url(path))
            .json(body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    GatewayError::BackendTimeout { role }
                } else {
                    GatewayError::BackendUnavailable {
                        role,
                        message: e.to_string(),
                    }
                }
            })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                GatewayError::BackendTimeout { role }
            } else {
                GatewayError::MalformedResponse {
                    role,
                    message: format!("unreadable body: {e}"),
                }
            }
        })?;
        if status.is_server_error() {
            return Err(GatewayError::BackendUnavailable {
                role,
                message: format!("HTTP {status}: {}", truncate(&text)),
            });
        }
        if !status.is_success() {
            return Err(GatewayError::MalformedResponse {
                role,
                message: format!("HTTP {status}: {}", truncate(&text)),
            });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::MalformedResponse {
            role,
            message: format!("schema violation: {e}"),
        })
    }

    /// Posts `body`, retrying transient failures up to `max_retries` times.
    fn call<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, GatewayError> {
        let mut attempt = 0;
        loop {
            match self.attempt(path, body) {
                Err(e) if e.is_transient() && attempt < self.endpoint.max_retries => {
                    attempt += 1;
                    warn!("{path}: {e}; retry {attempt}/{}", self.endpoint.max_retries);
                    std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
                }
                other => return other,
            }
        }
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// [`ModelBackend`] speaking the JSON wire protocol. Not usable from inside
/// an async runtime; call it from blocking threads.
pub struct HttpBackend {
    generator: Endpoint,
    image_embedder: Endpoint,
    text_embedder: Endpoint,
    agent: Endpoint,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, GatewayError> {
        Ok(Self {
            generator: Endpoint::new(config.generator)?,
            image_embedder: Endpoint::new(config.image_embedder)?,
            text_embedder: Endpoint::new(config.text_embedder)?,
            agent: Endpoint::new(config.agent)?,
        })
    }
}

fn malformed(role: Role) -> impl Fn(String) -> GatewayError {
    move |message| GatewayError::MalformedResponse { role, message }
}

impl ModelBackend for HttpBackend {
    fn generate_image(&self, prompt: &str, seed: u64) -> Result<ImageBlob, GatewayError> {
        let resp: ImagePayload = self.generator.call(
            wire::GENERATE_PATH,
            &GenerateRequest {
                prompt: prompt.to_string(),
                seed,
            },
        )?;
        resp.into_blob(ImageOrigin::Generated)
            .map_err(|e| malformed(Role::Generator)(e.to_string()))
    }

    fn embed_image(&self, blob: &ImageBlob) -> Result<Vec<f32>, GatewayError> {
        let resp: EmbedResponse = self
            .image_embedder
            .call(wire::EMBED_IMAGE_PATH, &ImagePayload::from_blob(blob))?;
        resp.checked().map_err(malformed(Role::ImageEmbedder))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        let resp: EmbedResponse = self.text_embedder.call(
            wire::EMBED_TEXT_PATH,
            &EmbedTextRequest {
                text: text.to_string(),
            },
        )?;
        resp.checked().map_err(malformed(Role::TextEmbedder))
    }

    fn initial_query(&self, target: &ImageBlob) -> Result<String, GatewayError> {
        let resp: QueryResponse = self.agent.call(
            wire::INITIAL_QUERY_PATH,
            &InitialQueryRequest {
                target: ImagePayload::from_blob(target),
            },
        )?;
        Ok(resp.query)
    }

    fn refine_query(
        &self,
        target: &ImageBlob,
        feedback: Option<&ImageBlob>,
        history: &DialogHistory,
        mode: RefineMode,
    ) -> Result<String, GatewayError> {
        let resp: QueryResponse = self.agent.call(
            wire::REFINE_PATH,
            &RefineRequest {
                target: ImagePayload::from_blob(target),
                feedback: feedback.map(ImagePayload::from_blob),
                mode: mode.as_str().to_string(),
                history: wire::wire_history(history),
            },
        )?;
        Ok(resp.query)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_defaults_and_limits() {
        assert_eq!(BackendEndpoint::new(Role::Generator, "x").timeout_ms, 120_000);
        assert_eq!(BackendEndpoint::new(Role::Agent, "x").timeout_ms, 10_000);
        let mut e = BackendEndpoint::new(Role::Agent, "http://h");
        e.max_retries = 6;
        assert!(e.validate().is_err());
        e.max_retries = 5;
        e.timeout_ms = 0;
        assert!(e.validate().is_err());
    }

    #[test]
    fn unreachable_backend_is_unavailable_after_retries() {
        // port 9 on localhost: nothing listens, connection is refused
        let mut cfg = HttpBackendConfig::new("http://127.0.0.1:9", "http://127.0.0.1:9", "http://127.0.0.1:9");
        cfg.agent.max_retries = 1;
        let backend = HttpBackend::new(cfg).unwrap();
        let blob = super::super::payload::encode_vector_png(&[1.0], ImageOrigin::Database);
        assert!(matches!(
            backend.initial_query(&blob),
            Err(GatewayError::BackendUnavailable {
                role: Role::Agent,
                ..
            })
        ));
    }

    #[test]
    fn url_join() {
        let e = BackendEndpoint::new(Role::Agent, "http://h:1/");
        assert_eq!(e.url("/v1/x"), "http://h:1/v1/x");
    }
}
