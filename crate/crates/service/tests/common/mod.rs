#![allow(dead_code)]

use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use axum::Router;

use genir_core::gateway::{
    DialogHistory, Gateway, GatewayError, ImageBlob, MockWorld, MockWorldConfig, ModelBackend,
    RefineMode, Role,
};
use genir_core::index::build_index;
use genir_core::session::{EmbeddedImages, Engine, LatencyClock, MemoryImageStore, NominalLatencies};
use genir_core::IndexSnapshot;
use genir_service::api::{router, AppState};
use genir_service::config::SessionDefaults;

/// Serves `app` on an ephemeral port from a background runtime and returns
/// its base URL.
pub fn spawn(app: Router) -> String {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

pub fn world(dim: usize, seed: u64) -> MockWorld {
    MockWorld::new(MockWorldConfig {
        dim,
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn mock_index(world: &MockWorld, n: usize) -> Arc<IndexSnapshot> {
    Arc::new(build_index(world.database_records(n), world.config().dim).unwrap())
}

pub fn engine_with(backend: Arc<dyn ModelBackend>, index: Arc<IndexSnapshot>, seed: u64) -> Engine {
    let dim = index.dim();
    Engine::new(
        index,
        Gateway::new(backend, dim),
        Arc::new(MemoryImageStore::new()),
        Arc::new(EmbeddedImages),
    )
    .unwrap()
    .with_clock(LatencyClock::Nominal(NominalLatencies::default()))
    .with_seed(seed)
}

pub fn mock_engine(seed: u64) -> Engine {
    let w = world(32, 5);
    let index = mock_index(&w, 200);
    engine_with(Arc::new(w), index, seed)
}

pub fn service(engine: Engine) -> String {
    let state = AppState::new(Arc::new(engine), SessionDefaults::default());
    spawn(router(Arc::new(state), &[]))
}

pub fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(30))
        .build()
        .unwrap()
}

/// Mock world with a slow generator and one prompt that always fails.
pub struct Unreliable {
    pub inner: MockWorld,
    pub delay: Duration,
    pub fail_prompt: String,
}

impl ModelBackend for Unreliable {
    fn generate_image(&self, prompt: &str, seed: u64) -> Result<ImageBlob, GatewayError> {
        thread::sleep(self.delay);
        if prompt == self.fail_prompt {
            return Err(GatewayError::BackendTimeout {
                role: Role::Generator,
            });
        }
        self.inner.generate_image(prompt, seed)
    }
    fn embed_image(&self, blob: &ImageBlob) -> Result<Vec<f32>, GatewayError> {
        self.inner.embed_image(blob)
    }
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        self.inner.embed_text(text)
    }
    fn initial_query(&self, target: &ImageBlob) -> Result<String, GatewayError> {
        self.inner.initial_query(target)
    }
    fn refine_query(
        &self,
        target: &ImageBlob,
        feedback: Option<&ImageBlob>,
        history: &DialogHistory,
        mode: RefineMode,
    ) -> Result<String, GatewayError> {
        self.inner.refine_query(target, feedback, history, mode)
    }
}
