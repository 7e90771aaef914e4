//! Interactive generative image retrieval.
//!
//! A searcher's text query is rendered by an image generator, the synthetic
//! image is embedded and matched against an image database by exact cosine
//! search, and the searcher (or a simulated agent) refines the query from the
//! visual feedback, round after round.
//!
//! * [`index`]: exact top-K search and rank over unit-norm embeddings, plus
//!   the `GENIRIDX` file format.
//! * [`gateway`]: generator / embedder / agent access over HTTP, and a
//!   deterministic mock world.
//! * [`session`]: the multi-round state machine and simulated sessions.
//! * [`curation`]: batch trajectory dataset generation (JSONL).
//! * [`eval`]: Hits@K curves, hybrid feedback analysis, latency reports.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below fix it to
//! `f32`, the precision of the persisted index.

pub mod curation;
pub mod embedding;
pub mod eval;
pub mod gateway;
pub mod index;
pub mod rng;
pub mod scalar;
pub mod session;

pub use scalar::Scalar;

pub type Embedding = embedding::Embedding<f32>;
pub type ImageRecord = index::ImageRecord<f32>;
pub type IndexSnapshot = index::IndexSnapshot<f32>;
pub type RetrievalResult = index::RetrievalResult<f32>;
pub type ScoredId = index::ScoredId<f32>;
