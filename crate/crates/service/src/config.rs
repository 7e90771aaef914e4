//! Service configuration: a TOML file with `GENIR_*` environment overrides.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use genir_core::gateway::{
    BackendEndpoint, Gateway, HttpBackend, HttpBackendConfig, MockWorld, MockWorldConfig,
};
use genir_core::index::{build_index, load_index};
use genir_core::session::{
    DatabaseImages, EmbeddedImages, FeedbackMode, FsImages, LatencyClock, ModeKind,
    NominalLatencies, SessionConfig,
};
use genir_core::IndexSnapshot;

pub const GENERATOR_URL_ENV: &str = "GENIR_GENERATOR_URL";
pub const EMBEDDER_URL_ENV: &str = "GENIR_EMBEDDER_URL";
pub const AGENT_URL_ENV: &str = "GENIR_AGENT_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockChoice {
    /// Nominal for the mock backend, wall clock otherwise.
    #[default]
    Auto,
    Wall,
    Nominal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub generator_url: Option<String>,
    pub embedder_url: Option<String>,
    pub agent_url: Option<String>,
    pub generator_timeout_ms: u64,
    pub timeout_ms: u64,
    pub max_retries: u32,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self {
            generator_url: None,
            embedder_url: None,
            agent_url: None,
            generator_timeout_ms: 120_000,
            timeout_ms: 10_000,
            max_retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockSection {
    #[serde(flatten)]
    pub world: MockWorldConfig,
    /// Size of the synthetic database used when no index file is given.
    pub database_size: usize,
}

impl Default for MockSection {
    fn default() -> Self {
        Self {
            world: MockWorldConfig::default(),
            database_size: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionDefaults {
    pub mode: ModeKind,
    pub visual_fraction: Option<f64>,
    pub k: usize,
    pub max_rounds: u32,
}

impl Default for SessionDefaults {
    fn default() -> Self {
        Self {
            mode: ModeKind::Generative,
            visual_fraction: None,
            k: 10,
            max_rounds: 10,
        }
    }
}

impl SessionDefaults {
    pub fn live_config(&self) -> SessionConfig {
        SessionConfig {
            k: self.k,
            max_rounds: self.max_rounds,
            ..SessionConfig::live(FeedbackMode {
                kind: self.mode,
                visual_fraction: self.visual_fraction,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen_address: String,
    pub index_path: Option<PathBuf>,
    pub backend: BackendKind,
    pub gateway: GatewaySection,
    pub mock: MockSection,
    pub session_defaults: SessionDefaults,
    pub static_image_roots: Vec<PathBuf>,
    /// Completed live sessions are appended here as trajectory records.
    pub trajectory_log: Option<PathBuf>,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
    pub seed: u64,
    pub clock: ClockChoice,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen_address: "127.0.0.1:8080".into(),
            index_path: None,
            backend: BackendKind::Mock,
            gateway: GatewaySection::default(),
            mock: MockSection::default(),
            session_defaults: SessionDefaults::default(),
            static_image_roots: Vec::new(),
            trajectory_log: None,
            cors_origins: Vec::new(),
            seed: 0,
            clock: ClockChoice::Auto,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path` (defaults when `None`) and applies process environment
    /// overrides.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok());
        Ok(cfg)
    }

    /// Endpoint URLs from the environment win over the file. Setting any of
    /// them selects the HTTP backend.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        let mut any = false;
        for (name, slot) in [
            (GENERATOR_URL_ENV, &mut self.gateway.generator_url),
            (EMBEDDER_URL_ENV, &mut self.gateway.embedder_url),
            (AGENT_URL_ENV, &mut self.gateway.agent_url),
        ] {
            if let Some(v) = var(name).filter(|v| !v.trim().is_empty()) {
                *slot = Some(v);
                any = true;
            }
        }
        if any {
            self.backend = BackendKind::Http;
        }
    }

    pub fn latency_clock(&self) -> LatencyClock {
        match (self.clock, self.backend) {
            (ClockChoice::Nominal, _) | (ClockChoice::Auto, BackendKind::Mock) => {
                LatencyClock::Nominal(NominalLatencies::default())
            }
            _ => LatencyClock::WallClock,
        }
    }

    pub fn http_backend_config(&self) -> anyhow::Result<HttpBackendConfig> {
        let g = &self.gateway;
        let (Some(gen), Some(emb), Some(agent)) = (&g.generator_url, &g.embedder_url, &g.agent_url)
        else {
            bail!(
                "http backend needs generator, embedder and agent URLs ({GENERATOR_URL_ENV}, \
                 {EMBEDDER_URL_ENV}, {AGENT_URL_ENV})"
            );
        };
        let mut cfg = HttpBackendConfig::new(gen, emb, agent);
        cfg.generator.timeout_ms = g.generator_timeout_ms;
        for ep in [&mut cfg.image_embedder, &mut cfg.text_embedder, &mut cfg.agent] {
            ep.timeout_ms = g.timeout_ms;
        }
        for ep in [
            &mut cfg.generator,
            &mut cfg.image_embedder,
            &mut cfg.text_embedder,
            &mut cfg.agent,
        ] {
            ep.max_retries = g.max_retries;
        }
        cfg.endpoints()
            .iter()
            .try_for_each(|ep: &&BackendEndpoint| ep.validate())
            .map_err(anyhow::Error::msg)?;
        Ok(cfg)
    }

    pub fn mock_world(&self) -> anyhow::Result<MockWorld> {
        MockWorld::new(self.mock.world.clone()).map_err(anyhow::Error::msg)
    }

    /// The index file when configured, else the mock world's database.
    pub fn load_index(&self) -> anyhow::Result<IndexSnapshot> {
        match &self.index_path {
            Some(p) => load_index(p).with_context(|| format!("loading index {}", p.display())),
            None => {
                if self.backend != BackendKind::Mock {
                    bail!("index_path is required with the http backend");
                }
                let world = self.mock_world()?;
                Ok(build_index(
                    world.database_records(self.mock.database_size),
                    world.config().dim,
                )?)
            }
        }
    }

    pub fn gateway(&self, dim: usize) -> anyhow::Result<Gateway> {
        match self.backend {
            BackendKind::Mock => {
                let world = self.mock_world()?;
                if world.config().dim != dim {
                    bail!(
                        "mock dim {} does not match index dim {dim}",
                        world.config().dim
                    );
                }
                Ok(Gateway::mock(world))
            }
            BackendKind::Http => {
                let backend = HttpBackend::new(self.http_backend_config()?)?;
                Ok(Gateway::new(Arc::new(backend), dim))
            }
        }
    }

    pub fn database_images(&self) -> Arc<dyn DatabaseImages> {
        if self.static_image_roots.is_empty() {
            Arc::new(EmbeddedImages)
        } else {
            Arc::new(FsImages::new(self.static_image_roots.clone()))
        }
    }
}
