//! Operational shell around `genir-core`: configuration, the HTTP session
//! service, a wire-protocol server for model backends and the `genir` CLI.

pub mod api;
pub mod backend_server;
pub mod cli;
pub mod config;
pub mod embeddings;
