//! Project store, job queue and HTTP API around the `vplab-core` pipeline.
//!
//! ```no_run
//! # async fn run() -> Result<(), Box<dyn std::error::Error>> {
//! use vplab_core::segcore::SegModel;
//! use vplab_service::{router, worker_loop, AppState};
//!
//! let state = AppState::open("./vplab-data", SegModel::tiny_fixture()?)?;
//! tokio::spawn(worker_loop(state.clone()));
//! let listener = tokio::net::TcpListener::bind("127.0.0.1:8731").await?;
//! axum::serve(listener, router(state)).await?;
//! # Ok(()) }
//! ```

pub mod api;
pub mod codec;
pub mod error;
pub mod jobs;
pub mod pipeline;
pub mod store;

pub use api::{export_bytes, router, worker_loop, AppState, MaskPayload};
pub use error::{ApiError, ApiResult, ErrorBody};
pub use jobs::{JobKind, JobQueue, JobRecord, JobState, QueueCore};
pub use store::{Project, Store, SCHEMA_VERSION};
